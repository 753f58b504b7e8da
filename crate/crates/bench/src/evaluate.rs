use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hpn_core::heuristics::{two_opt, Heuristic};
use hpn_core::model::HpnModel;
use hpn_core::rng::derive_seed;
use hpn_core::{Instance, Tour};
use rayon::prelude::*;

use crate::report::InstanceResult;

pub const TWO_OPT_SUFFIX: &str = "+2opt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Heuristic(Heuristic),
    /// Greedy decoding with a trained network.
    Hpn,
}

/// A solver, optionally followed by 2-opt from its tour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub solver: Solver,
    pub two_opt: bool,
}

impl Method {
    pub fn with_two_opt(self) -> Self {
        Self {
            two_opt: true,
            ..self
        }
    }

    pub fn needs_model(&self) -> bool {
        self.solver == Solver::Hpn
    }

    pub fn solve(&self, inst: &Instance, seed: u64, model: Option<&HpnModel>) -> Result<Tour> {
        let tour = match self.solver {
            Solver::Heuristic(h) => h.solve(inst, seed),
            Solver::Hpn => model
                .context("method hpn needs a model checkpoint")?
                .greedy_tour(inst)?,
        };
        Ok(if self.two_opt { two_opt(inst, &tour, 1)? } else { tour })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.solver {
            Solver::Heuristic(h) => h.name(),
            Solver::Hpn => "hpn",
        };
        let suffix = if self.two_opt { TWO_OPT_SUFFIX } else { "" };
        write!(f, "{base}{suffix}")
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (base, two_opt) = match s.strip_suffix(TWO_OPT_SUFFIX) {
            Some(b) => (b, true),
            None => (s, false),
        };
        let solver = match base {
            "hpn" => Solver::Hpn,
            other => match Heuristic::from_name(other) {
                Some(h) => Solver::Heuristic(h),
                None => bail!(
                    "unknown method {s:?}; expected hpn or one of {}, optionally with {TWO_OPT_SUFFIX}",
                    Heuristic::ALL.map(Heuristic::name).join(", ")
                ),
            },
        };
        Ok(Self { solver, two_opt })
    }
}

/// Comma-separated method list. With `add_two_opt` every method is also run
/// composed with 2-opt.
pub fn parse_methods(list: &str, add_two_opt: bool) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        let variants = if add_two_opt && !m.two_opt {
            vec![m, m.with_two_opt()]
        } else {
            vec![m]
        };
        for v in variants {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    if out.is_empty() {
        bail!("no methods given");
    }
    Ok(out)
}

#[derive(Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub model: Option<&'a HpnModel>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

/// Runs every method on every instance. Results are ordered by method, then
/// instance id, whatever the worker count.
pub fn evaluate(instances: &[Instance], methods: &[Method], opts: EvalOptions<'_>) -> Result<Vec<InstanceResult>> {
    if let Some(m) = methods.iter().find(|m| m.needs_model()) {
        if opts.model.is_none() {
            bail!("method {m} needs --checkpoint");
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .context("building the worker pool")?;
    pool.install(|| {
        let mut out = Vec::with_capacity(methods.len() * instances.len());
        for method in methods {
            let rows: Result<Vec<InstanceResult>> = instances
                .par_iter()
                .enumerate()
                .map(|(id, inst)| {
                    let start = Instant::now();
                    let tour = method.solve(inst, derive_seed(opts.seed, 0, id as u64), opts.model)?;
                    Ok(InstanceResult {
                        method: method.to_string(),
                        n: inst.len(),
                        instance_id: id,
                        length: tour.length,
                        seconds: start.elapsed().as_secs_f64(),
                    })
                })
                .collect();
            out.extend(rows?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in ["nearest_neighbor", "two_opt", "hpn+2opt", "farthest_insertion+2opt", "random"] {
            assert_eq!(name.parse::<Method>().unwrap().to_string(), name);
        }
        let err = "christofides".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("unknown method"));
    }

    #[test]
    fn two_opt_flag_adds_composed_variants() {
        let ms = parse_methods("nearest_neighbor, hpn", true).unwrap();
        let names: Vec<String> = ms.iter().map(Method::to_string).collect();
        assert_eq!(names, ["nearest_neighbor", "nearest_neighbor+2opt", "hpn", "hpn+2opt"]);
        assert!(parse_methods(" , ", false).is_err());
    }

    #[test]
    fn hpn_without_model_is_rejected() {
        let inst = hpn_core::generate_uniform(5, 1, 1);
        let ms = parse_methods("hpn", false).unwrap();
        let err = evaluate(&inst, &ms, EvalOptions::default()).unwrap_err();
        assert!(err.to_string().contains("--checkpoint"));
    }

    #[test]
    fn order_does_not_depend_on_workers() {
        let inst = hpn_core::generate_uniform(12, 20, 3);
        let ms = parse_methods("nearest_neighbor,two_opt", false).unwrap();
        let run = |workers| {
            evaluate(&inst, &ms, EvalOptions { workers, seed: 4, model: None })
                .unwrap()
                .into_iter()
                .map(|r| (r.method, r.instance_id, r.length))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(4));
    }
}
