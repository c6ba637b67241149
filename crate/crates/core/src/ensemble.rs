//! Hard and soft voting ensembles over trained models.
//!
//! Hard voting takes the label with a strict plurality and abstains on
//! ties; soft voting takes the argmax of the mean softmax vector and
//! abstains on exact (1e-9) ties. Abstentions count as errors in every
//! accuracy metric here.

use crate::error::{Error, Result};
use crate::styshapes::{DatasetBundle, Split};
use crate::tensor::Tensor;
use crate::uap::{apply_perturbation, AttackMode, Perturbation};
use crate::zoo::ModelHandle;

/// Soft-vote tie tolerance on mean probabilities.
const SOFT_TIE_EPS: f64 = 1e-9;

/// Simplex tolerance for member probability vectors.
const SIMPLEX_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteOutcome {
    Class(usize),
    /// No strict plurality (hard) or an exact tie (soft).
    Abstain,
}

impl VoteOutcome {
    pub fn is_correct(&self, label: usize) -> bool {
        matches!(self, VoteOutcome::Class(c) if *c == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Voting {
    Hard,
    Soft,
}

impl Voting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Voting::Hard => "hard",
            Voting::Soft => "soft",
        }
    }
}

/// Label with a strict plurality (count strictly greater than every
/// other label's count); abstain otherwise.
pub fn hard_vote(predictions: &[usize]) -> Result<VoteOutcome> {
    if predictions.is_empty() {
        return Err(Error::invalid("hard_vote: empty prediction list"));
    }
    let max_label = *predictions.iter().max().expect("non-empty");
    let mut counts = vec![0usize; max_label + 1];
    for &p in predictions {
        counts[p] += 1;
    }
    let best = *counts.iter().max().expect("non-empty");
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (label, _) = winners.next().expect("at least one winner");
    if winners.next().is_some() {
        return Ok(VoteOutcome::Abstain);
    }
    Ok(VoteOutcome::Class(label))
}

/// Argmax of the elementwise mean of member probability vectors; abstain
/// if the maximum is shared within 1e-9. Vectors must lie on the simplex
/// (sum 1 ± 1e-5) and share a common length.
pub fn soft_vote(probabilities: &[Vec<f64>]) -> Result<VoteOutcome> {
    if probabilities.is_empty() {
        return Err(Error::invalid("soft_vote: empty probability list"));
    }
    let k = probabilities[0].len();
    if k == 0 {
        return Err(Error::invalid("soft_vote: zero-class probability vector"));
    }
    for (i, p) in probabilities.iter().enumerate() {
        if p.len() != k {
            return Err(Error::invalid(format!(
                "soft_vote: member {i} has {} classes, expected {k}",
                p.len()
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_EPS || p.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "soft_vote: member {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    let mut mean = vec![0.0f64; k];
    for p in probabilities {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= probabilities.len() as f64;
    }
    let best = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..k).filter(|&j| best - mean[j] <= SOFT_TIE_EPS).collect();
    if winners.len() > 1 {
        return Ok(VoteOutcome::Abstain);
    }
    Ok(VoteOutcome::Class(winners[0]))
}

/// Voting ensemble over trained models sharing input shape and class
/// count. Two or more members are expected; a single member is accepted
/// as the degenerate case.
pub struct Ensemble<'a> {
    members: Vec<&'a ModelHandle>,
    voting: Voting,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a ModelHandle>, voting: Voting) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble: at least one member required"));
        }
        let classes = members[0].arch().classes;
        let input = members[0].arch().input;
        for m in &members {
            if m.arch().classes != classes || m.arch().input != input {
                return Err(Error::ShapeMismatch {
                    op: "ensemble",
                    lhs: vec![classes],
                    rhs: vec![m.arch().classes],
                });
            }
        }
        Ok(Ensemble { members, voting })
    }

    pub fn members(&self) -> &[&'a ModelHandle] {
        &self.members
    }

    pub fn voting(&self) -> Voting {
        self.voting
    }

    /// Per-image vote over member forward passes.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<VoteOutcome>> {
        let n = images.shape()[0];
        match self.voting {
            Voting::Hard => {
                let mut member_preds = Vec::with_capacity(self.members.len());
                for m in &self.members {
                    member_preds.push(m.predict(images)?);
                }
                (0..n)
                    .map(|i| {
                        let votes: Vec<usize> = member_preds.iter().map(|p| p[i]).collect();
                        hard_vote(&votes)
                    })
                    .collect()
            }
            Voting::Soft => {
                let mut member_probs = Vec::with_capacity(self.members.len());
                for m in &self.members {
                    member_probs.push(m.probabilities(images)?);
                }
                (0..n)
                    .map(|i| {
                        let rows: Vec<Vec<f64>> =
                            member_probs.iter().map(|p| p[i].clone()).collect();
                        soft_vote(&rows)
                    })
                    .collect()
            }
        }
    }

    /// Accuracy with abstentions counted as errors.
    pub fn accuracy(&self, data: &DatasetBundle, split: Split) -> Result<f64> {
        let ix = data.split_indices(split);
        if ix.is_empty() {
            return Err(Error::EmptySplit {
                op: "ensemble accuracy",
                split: format!("{split:?}"),
            });
        }
        let outcomes = self.predict(&data.batch(&ix))?;
        let hits = outcomes
            .iter()
            .zip(&ix)
            .filter(|(o, &i)| o.is_correct(data.label(i) as usize))
            .count();
        Ok(hits as f64 / ix.len() as f64)
    }
}

/// Clean accuracy plus worst-case accuracy over a perturbation pool.
#[derive(Debug, Clone)]
pub struct EnsembleEvaluation {
    pub clean_accuracy: f64,
    pub worst_case_accuracy: f64,
    pub worst_case_uap: String,
}

/// Evaluate an ensemble against a pool of untargeted perturbations at a
/// fixed ε. The pool must contain each member's white-box untargeted
/// perturbation; a missing one is rejected naming the member.
pub fn evaluate_ensemble(
    ensemble: &Ensemble<'_>,
    data: &DatasetBundle,
    split: Split,
    uaps: &[&Perturbation],
    epsilon: f32,
) -> Result<EnsembleEvaluation> {
    if uaps.is_empty() {
        return Err(Error::invalid("evaluate_ensemble: empty perturbation pool"));
    }
    for u in uaps {
        if u.epsilon != epsilon {
            return Err(Error::invalid(format!(
                "evaluate_ensemble: pool entry at eps {} but requested {epsilon}",
                u.epsilon
            )));
        }
    }
    for member in ensemble.members() {
        let covered = uaps.iter().any(|u| {
            u.mode == AttackMode::Untargeted
                && u.source.arch == member.arch().name.as_str()
                && u.source.regime == member.regime().as_str()
        });
        if !covered {
            return Err(Error::invalid(format!(
                "evaluate_ensemble: pool lacks the white-box untargeted perturbation of member {}",
                member.id()
            )));
        }
    }

    let ix = data.split_indices(split);
    if ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "evaluate_ensemble",
            split: format!("{split:?}"),
        });
    }
    let images = data.batch(&ix);
    let clean = ensemble.accuracy(data, split)?;

    let mut worst: Option<(f64, String)> = None;
    for u in uaps {
        let adv = apply_perturbation(&images, &u.delta)?;
        let outcomes = ensemble.predict(&adv)?;
        let hits = outcomes
            .iter()
            .zip(&ix)
            .filter(|(o, &i)| o.is_correct(data.label(i) as usize))
            .count();
        let acc = hits as f64 / ix.len() as f64;
        if worst.as_ref().is_none_or(|(best, _)| acc < *best) {
            worst = Some((acc, u.id()));
        }
    }
    let (worst_case_accuracy, worst_case_uap) = worst.expect("non-empty pool");
    Ok(EnsembleEvaluation {
        clean_accuracy: clean,
        worst_case_accuracy,
        worst_case_uap,
    })
}
