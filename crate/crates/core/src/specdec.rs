//! Draft/verify speculative sampling over Markov language models.
//!
//! Each round the draft proposes up to `k` tokens; the target accepts a
//! drafted token `x` with probability `min(1, p(x)/q(x))` and on rejection
//! emits a token from the normalised residual `max(p − q, 0)`. One uniform
//! variate decides both: with acceptance probability `a`, `u < a` accepts
//! and otherwise `(u − a)/(1 − a)` samples the residual.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::rng::{seeded, uniform};

const SUM_TOLERANCE: f64 = 1e-12;
const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovLM {
    pub vocab: usize,
    /// 0: tokens are i.i.d. from `table[0]`; 1: `table[prev]` is the next
    /// token's law and `initial` the first token's.
    pub order: u8,
    pub table: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        bail!(InvalidDistribution, "{} has negative or non-finite entries", what);
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        bail!(InvalidDistribution, "{} sums to {}", what, s);
    }
    Ok(())
}

impl MarkovLM {
    pub fn unigram(p: Vec<f64>) -> Result<Self> {
        let m = Self {
            vocab: p.len(),
            order: 0,
            table: vec![p.clone()],
            initial: p,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn bigram(initial: Vec<f64>, table: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self {
            vocab: initial.len(),
            order: 1,
            table,
            initial,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            bail!(InvalidDistribution, "empty vocabulary");
        }
        let rows = match self.order {
            0 => 1,
            1 => self.vocab,
            o => bail!(InvalidDistribution, "order {} not in {{0, 1}}", o),
        };
        if self.table.len() != rows || self.table.iter().any(|r| r.len() != self.vocab) {
            bail!(InvalidDistribution, "table must be {}x{}", rows, self.vocab);
        }
        if self.initial.len() != self.vocab {
            bail!(InvalidDistribution, "initial distribution has {} entries", self.initial.len());
        }
        check_distribution(&self.initial, "initial distribution")?;
        for (i, r) in self.table.iter().enumerate() {
            check_distribution(r, &alloc::format!("table row {}", i))?;
        }
        Ok(())
    }

    /// Law of the next token after `prev` (`None` at the start).
    pub fn next(&self, prev: Option<usize>) -> &[f64] {
        match (self.order, prev) {
            (0, _) => &self.table[0],
            (_, None) => &self.initial,
            (_, Some(t)) => &self.table[t],
        }
    }

    /// Exact law of the first `horizon` tokens.
    pub fn sequence_law(&self, horizon: usize) -> BTreeMap<Vec<usize>, f64> {
        let mut law = BTreeMap::new();
        law.insert(Vec::new(), 1.0);
        for _ in 0..horizon {
            let mut next = BTreeMap::new();
            for (seq, pr) in law {
                let dist = self.next(seq.last().copied());
                for (t, &pt) in dist.iter().enumerate() {
                    if pt > 0.0 {
                        let mut s = seq.clone();
                        s.push(t);
                        *next.entry(s).or_insert(0.0) += pr * pt;
                    }
                }
            }
            law = next;
        }
        law
    }
}

/// Inverse-CDF draw; never returns a zero-probability token.
fn sample(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        acc += v;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn acceptance(p: &[f64], q: &[f64], drafted: usize) -> f64 {
    (p[drafted] / q[drafted]).min(1.0)
}

/// Residual `max(p − q, 0)` and its mass.
fn residual(p: &[f64], q: &[f64]) -> (Vec<f64>, f64) {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass = r.iter().sum();
    (r, mass)
}

/// Verifies one drafted token. Returns whether it was accepted and the
/// emitted token. A residual with mass below `1e-12` forces acceptance.
pub fn speculative_step(p: &[f64], q: &[f64], drafted: usize, u: f64) -> Result<(bool, usize)> {
    if p.len() != q.len() || drafted >= p.len() {
        bail!(InvalidDistribution, "incompatible distributions or token");
    }
    check_distribution(p, "target distribution")?;
    check_distribution(q, "draft distribution")?;
    if !(q[drafted] > 0.0) {
        return Err(Error::DraftSupport(drafted));
    }
    let a = acceptance(p, q, drafted);
    if u < a {
        return Ok((true, drafted));
    }
    let (r, mass) = residual(p, q);
    if mass < RESIDUAL_FLOOR {
        return Ok((true, drafted));
    }
    let u2 = (u - a) / (1.0 - a);
    let scaled: Vec<f64> = r.iter().map(|v| v / mass).collect();
    Ok((false, sample(&scaled, u2)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecDecodeStats {
    pub tokens_generated: usize,
    pub rounds: usize,
    /// `accepted_per_round[j]`: rounds with exactly `j` drafted tokens accepted.
    pub accepted_per_round: Vec<usize>,
    pub drafted: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub tokens_per_round: f64,
}

impl SpecDecodeStats {
    /// Tokens implied by the histogram: accepted drafts plus one per round.
    pub fn tokens_from_histogram(&self) -> usize {
        self.accepted_per_round
            .iter()
            .enumerate()
            .map(|(j, &n)| n * (j + 1))
            .sum()
    }
}

fn check_pair(target: &MarkovLM, draft: &MarkovLM, k: usize) -> Result<()> {
    target.validate()?;
    draft.validate()?;
    if target.vocab != draft.vocab {
        bail!(InvalidArgument, "vocabularies differ: {} vs {}", target.vocab, draft.vocab);
    }
    if k == 0 {
        bail!(InvalidArgument, "lookahead must be at least 1");
    }
    Ok(())
}

/// Emits exactly `n_tokens` tokens. The last round drafts at most one token
/// fewer than remain, so no round overshoots.
pub fn generate(
    target: &MarkovLM,
    draft: &MarkovLM,
    k: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<(Vec<usize>, SpecDecodeStats)> {
    check_pair(target, draft, k)?;
    let mut rng = seeded(seed);
    let mut out: Vec<usize> = Vec::with_capacity(n_tokens);
    let mut stats = SpecDecodeStats {
        accepted_per_round: vec![0; k + 1],
        ..SpecDecodeStats::default()
    };
    while out.len() < n_tokens {
        let lookahead = k.min(n_tokens - out.len() - 1);
        let start = out.last().copied();
        let mut proposals = Vec::with_capacity(lookahead);
        let mut ctx = start;
        for _ in 0..lookahead {
            let q = draft.next(ctx);
            let x = sample(q, uniform(&mut rng));
            proposals.push(x);
            ctx = Some(x);
        }
        let mut ctx = start;
        let mut accepted = 0;
        let mut rejected = false;
        for &x in &proposals {
            let (ok, tok) = speculative_step(target.next(ctx), draft.next(ctx), x, uniform(&mut rng))?;
            out.push(tok);
            ctx = Some(tok);
            if !ok {
                rejected = true;
                break;
            }
            accepted += 1;
        }
        if !rejected {
            out.push(sample(target.next(ctx), uniform(&mut rng)));
        }
        stats.rounds += 1;
        stats.drafted += lookahead;
        stats.accepted += accepted;
        stats.accepted_per_round[accepted] += 1;
    }
    stats.tokens_generated = out.len();
    stats.acceptance_rate = if stats.drafted == 0 {
        0.0
    } else {
        stats.accepted as f64 / stats.drafted as f64
    };
    stats.tokens_per_round = out.len() as f64 / stats.rounds.max(1) as f64;
    Ok((out, stats))
}

pub const ORACLE_MAX_VOCAB: usize = 6;
pub const ORACLE_MAX_HORIZON: usize = 3;

/// Exact law of the first `horizon` tokens emitted by [`generate`],
/// integrating over every draft proposal, acceptance event and residual
/// outcome.
pub fn exact_output_distribution(
    target: &MarkovLM,
    draft: &MarkovLM,
    k: usize,
    horizon: usize,
) -> Result<BTreeMap<Vec<usize>, f64>> {
    check_pair(target, draft, k)?;
    if target.vocab > ORACLE_MAX_VOCAB || horizon > ORACLE_MAX_HORIZON {
        return Err(Error::OracleTooLarge(alloc::format!(
            "vocab {} (max {}), horizon {} (max {})",
            target.vocab,
            ORACLE_MAX_VOCAB,
            horizon,
            ORACLE_MAX_HORIZON
        )));
    }
    let mut law = BTreeMap::new();
    expand(target, draft, k, horizon, Vec::new(), 1.0, &mut law);
    Ok(law)
}

fn expand(
    target: &MarkovLM,
    draft: &MarkovLM,
    k: usize,
    horizon: usize,
    prefix: Vec<usize>,
    prob: f64,
    law: &mut BTreeMap<Vec<usize>, f64>,
) {
    if prob == 0.0 {
        return;
    }
    if prefix.len() >= horizon {
        *law.entry(prefix).or_insert(0.0) += prob;
        return;
    }
    let lookahead = k.min(horizon - prefix.len() - 1);
    // every round outcome: (emitted tokens, probability)
    let mut outcomes: Vec<(Vec<usize>, f64)> = Vec::new();
    round(target, draft, lookahead, prefix.last().copied(), Vec::new(), 1.0, &mut outcomes);
    for (emitted, p) in outcomes {
        let mut next = prefix.clone();
        next.extend(emitted);
        expand(target, draft, k, horizon, next, prob * p, law);
    }
}

/// Enumerates one round with `lookahead` drafts remaining after `emitted`.
fn round(
    target: &MarkovLM,
    draft: &MarkovLM,
    lookahead: usize,
    ctx: Option<usize>,
    emitted: Vec<usize>,
    prob: f64,
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    if prob == 0.0 {
        return;
    }
    let p = target.next(ctx);
    if lookahead == 0 {
        for (t, &pt) in p.iter().enumerate() {
            let mut e = emitted.clone();
            e.push(t);
            out.push((e, prob * pt));
        }
        return;
    }
    let q = draft.next(ctx);
    let (r, mass) = residual(p, q);
    for (x, &qx) in q.iter().enumerate() {
        if qx <= 0.0 {
            continue;
        }
        let a = if mass < RESIDUAL_FLOOR { 1.0 } else { acceptance(p, q, x) };
        let mut e = emitted.clone();
        e.push(x);
        round(target, draft, lookahead - 1, Some(x), e, prob * qx * a, out);
        if a < 1.0 {
            for (y, &ry) in r.iter().enumerate() {
                let mut e = emitted.clone();
                e.push(y);
                out.push((e, prob * qx * (1.0 - a) * ry / mass));
            }
        }
    }
}

/// Total-variation distance between two sequence laws.
pub fn total_variation(a: &BTreeMap<Vec<usize>, f64>, b: &BTreeMap<Vec<usize>, f64>) -> f64 {
    let mut keys: Vec<&Vec<usize>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| math::abs(a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)))
        .sum::<f64>()
}

/// `Σ_x min(p(x), q(x))`: per-token acceptance probability for i.i.d. models.
pub fn acceptance_rate(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum()
}

/// `(1 − α^{k+1})/(1 − α)`, or `k + 1` at `α = 1`.
pub fn expected_tokens_per_round(alpha: f64, k: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) || k == 0 {
        bail!(InvalidArgument, "need alpha in [0, 1] and k >= 1");
    }
    if alpha == 1.0 {
        return Ok((k + 1) as f64);
    }
    Ok((1.0 - libm::pow(alpha, (k + 1) as f64)) / (1.0 - alpha))
}
