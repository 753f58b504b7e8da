use hpn_autograd::{Tape, Tensor, Var};
use rand::Rng as _;

use super::features::{extract_features, start_features};
use super::network::{Bound, EncoderOutputs, HpnModel, LstmState};
use super::{ModelError, Result};
use crate::rng::Rng;
use crate::tsp::{check_permutation, Instance, Tour};

/// Probabilities below this are never sampled.
pub const SAMPLE_FLOOR: f64 = 1e-12;

pub enum DecodeMode<'a> {
    /// Highest probability, lowest index on ties.
    Greedy,
    Sample(&'a mut Rng),
    /// Replays a given tour, e.g. to score it or to check gradients.
    Forced(&'a [usize]),
}

/// Values of one decoding step, kept when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub logits: Vec<f64>,
    pub visited: Vec<bool>,
    pub chosen: usize,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub tour: Tour,
    /// Sum of the chosen actions' log-probabilities. Differentiable when the
    /// tape records.
    pub log_prob: Var,
    pub log_prob_value: f64,
    /// Empty unless traced.
    pub steps: Vec<StepDistribution>,
}

impl HpnModel {
    /// Decodes a full tour of `inst` on `tape`.
    ///
    /// On a no_grad tape intermediate values are dropped after every step,
    /// so memory stays at one step's worth.
    pub fn rollout(&self, tape: &mut Tape, inst: &Instance, mode: DecodeMode<'_>) -> Result<Rollout> {
        self.run(tape, inst, mode, false)
    }

    /// Like [`HpnModel::rollout`] and also records every step's distribution.
    pub fn rollout_traced(&self, tape: &mut Tape, inst: &Instance, mode: DecodeMode<'_>) -> Result<Rollout> {
        self.run(tape, inst, mode, true)
    }

    /// Greedy tour on a fresh no_grad tape.
    pub fn greedy_tour(&self, inst: &Instance) -> Result<Tour> {
        let mut tape = Tape::no_grad();
        Ok(self.rollout(&mut tape, inst, DecodeMode::Greedy)?.tour)
    }

    fn run(&self, tape: &mut Tape, inst: &Instance, mut mode: DecodeMode<'_>, trace: bool) -> Result<Rollout> {
        let n = inst.len();
        if let DecodeMode::Forced(order) = &mode {
            check_permutation(order, n)?;
        }
        let b = self.bind(tape);
        let fixed_context = if self.config().context_per_step {
            None
        } else {
            Some(self.encode(tape, &b, &start_features(inst))?)
        };
        let recording = tape.is_recording();
        let mut mark = tape.len();
        let mut state = self.zero_state(tape);
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut chosen_log_probs = Vec::with_capacity(if recording { n } else { 0 });
        let mut log_prob_value = 0.0;
        let mut steps = Vec::new();
        let mut current = None;

        for step in 0..n {
            let enc = match fixed_context {
                Some(enc) => enc,
                None => {
                    let features = match current {
                        None => start_features(inst),
                        Some(c) => extract_features(inst, c),
                    };
                    self.encode(tape, &b, &features)?
                }
            };
            let input = self.point_input(tape, &b, inst, current)?;
            state = self.point_encode(tape, &b, input, state)?;
            let out = self.decode_step(tape, &b, &enc, state.hidden, &visited)?;
            let next = {
                let probs = tape.value(out.probs).data();
                let logits = tape.value(out.logits).data();
                match &mut mode {
                    DecodeMode::Greedy => argmax_unvisited(logits, &visited),
                    DecodeMode::Sample(rng) => sample(probs, &visited, rng),
                    DecodeMode::Forced(order) => order[step],
                }
            };
            if trace {
                steps.push(StepDistribution {
                    probs: tape.value(out.probs).data().to_vec(),
                    u1: tape.value(out.u1).data().to_vec(),
                    u2: tape.value(out.u2).data().to_vec(),
                    logits: tape.value(out.logits).data().to_vec(),
                    visited: visited.clone(),
                    chosen: next,
                });
            }
            let lp = tape.value(out.log_probs).data()[next];
            if !lp.is_finite() {
                return Err(ModelError::Mismatch(format!(
                    "step {step} chose city {next} with zero probability"
                )));
            }
            log_prob_value += lp;
            if recording {
                chosen_log_probs.push(tape.select(out.log_probs, 0, next)?);
            } else {
                let hidden = tape.value(state.hidden).clone();
                let cell = tape.value(state.cell).clone();
                tape.truncate(mark)?;
                state = LstmState {
                    hidden: tape.constant(hidden),
                    cell: tape.constant(cell),
                };
                mark = tape.len();
            }
            visited[next] = true;
            order.push(next);
            current = Some(next);
        }

        let log_prob = if recording && !chosen_log_probs.is_empty() {
            tape.add_all(&chosen_log_probs)?
        } else {
            tape.constant(Tensor::scalar(log_prob_value))
        };
        Ok(Rollout {
            tour: Tour::new(inst, order)?,
            log_prob,
            log_prob_value,
            steps,
        })
    }

    /// Context for one decode step without running a whole rollout.
    pub fn step_context(&self, tape: &mut Tape, b: &Bound, inst: &Instance, current: Option<usize>) -> Result<EncoderOutputs> {
        let features = match current {
            None => start_features(inst),
            Some(c) => extract_features(inst, c),
        };
        self.encode(tape, b, &features)
    }
}

fn argmax_unvisited(logits: &[f64], visited: &[bool]) -> usize {
    let mut best = None;
    for (j, &u) in logits.iter().enumerate() {
        if visited[j] {
            continue;
        }
        match best {
            Some((_, bu)) if u <= bu => {}
            _ => best = Some((j, u)),
        }
    }
    best.expect("an unvisited city exists").0
}

fn sample(probs: &[f64], visited: &[bool], rng: &mut Rng) -> usize {
    let eligible = |j: usize| !visited[j] && probs[j] >= SAMPLE_FLOOR;
    let total: f64 = (0..probs.len()).filter(|&j| eligible(j)).map(|j| probs[j]).sum();
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for j in (0..probs.len()).filter(|&j| eligible(j)) {
        acc += probs[j];
        last = Some(j);
        if target < acc {
            return j;
        }
    }
    last.unwrap_or_else(|| argmax_unvisited(probs, visited))
}
