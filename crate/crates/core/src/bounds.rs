//! Synchronization probabilities as functions of retransmission bounds, and
//! the search for the smallest bounds that meet every requirement.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{EventKey, ProtocolSpec, WellPosednessReport};

/// Default upper limit on any single retransmission bound.
pub const DEFAULT_CAP: u32 = 512;

/// Probability that a two-event sequence with bounds `n1`, `n2` synchronizes
/// when every broadcast is lost with probability `delta`.
///
/// `ϱ(1-δ^{n1+1}) + ϱ³/(1-δϱ) Σ_{i=1}^{n1} δ^i [1-(δϱ)^{min(n1+1-i, n2)}]`
/// with `ϱ = 1-δ`.
pub fn sync_prob_two(n1: u32, n2: u32, delta: f64) -> f64 {
    let rho = 1.0 - delta;
    let dr = delta * rho;
    let mut sum = 0.0;
    let mut di = 1.0;
    for i in 1..=n1 {
        di *= delta;
        let m = (n1 + 1 - i).min(n2);
        sum += di * (1.0 - dr.powi(m as i32));
    }
    rho * (1.0 - delta.powi(n1 as i32 + 1)) + rho.powi(3) / (1.0 - dr) * sum
}

/// Probability that the sequence with per-event bounds `bounds` synchronizes.
///
/// Phase `k` starts when the sender of event `k` first broadcasts; a loss at
/// phase `k ≥ 2` costs one retransmission of event `k` and one of event
/// `k-1`, since the previous sender re-sends on timeout and the receiver
/// answers again. The last phase also needs the final re-sent broadcast to
/// arrive, which gives the `(δϱ)^j` factor.
pub fn sync_prob(bounds: &[u32], delta: f64) -> Result<f64, BoundsError> {
    match bounds {
        [] | [_] => Err(BoundsError::SequenceTooShort(bounds.len())),
        [n1, n2] => Ok(sync_prob_two(*n1, *n2, delta)),
        _ => Ok(sync_prob_chain(bounds, delta)),
    }
}

fn sync_prob_chain(bounds: &[u32], delta: f64) -> f64 {
    let rho = 1.0 - delta;
    let l = bounds.len();
    // tail[a] = P̂ for the current phase given `a` retransmissions left on
    // the previous event
    let last = bounds[l - 1];
    let mut tail: Vec<f64> = (0..=bounds[l - 2])
        .map(|a| {
            let mut acc = 0.0;
            let mut term = 1.0;
            for _ in 0..=a.min(last) {
                acc += term;
                term *= delta * rho;
            }
            rho * acc
        })
        .collect();
    for k in (1..l - 1).rev() {
        let nk = bounds[k];
        tail = (0..=bounds[k - 1])
            .map(|a| {
                let mut acc = 0.0;
                let mut dj = 1.0;
                for j in 0..=a.min(nk) {
                    acc += dj * tail[(nk - j) as usize];
                    dj *= delta;
                }
                rho * acc
            })
            .collect();
    }
    let mut acc = 0.0;
    let mut di = 1.0;
    for i in 0..=bounds[0] {
        acc += di * tail[(bounds[0] - i) as usize];
        di *= delta;
    }
    rho * acc
}

/// The value `ϱ/(1-δϱ)` approached as all bounds grow; it is attained only
/// when `δ ∈ {0, 1}`.
pub fn sup_sync_prob(delta: f64) -> f64 {
    let rho = 1.0 - delta;
    rho / (1.0 - delta * rho)
}

/// Whether some finite bounds could reach `p`, judged by the supremum alone.
pub fn below_supremum(p: f64, delta: f64) -> bool {
    let sup = sup_sync_prob(delta);
    if delta > 0.0 && delta < 1.0 {
        p < sup
    } else {
        p <= sup
    }
}

/// Retransmission bounds keyed by the names from [`bound_names`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundsVector(pub IndexMap<String, u32>);

impl BoundsVector {
    pub fn get(&self, name: &str) -> Option<u32> {
        self.0.get(name).copied()
    }

    pub fn sum(&self) -> u64 {
        self.0.values().map(|&n| n as u64).sum()
    }
}

impl fmt::Display for BoundsVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// One name per event key: the event name when it is unambiguous, otherwise
/// the name qualified by its endpoints.
pub fn bound_names(spec: &ProtocolSpec) -> Vec<(EventKey, String)> {
    let keys = spec.event_keys();
    let mut names: Vec<(EventKey, String)> = Vec::with_capacity(keys.len());
    for key in &keys {
        let ambiguous = keys.iter().filter(|k| k.name == key.name).count() > 1;
        let mut name = if ambiguous {
            format!("{}_{}{}", key.name, key.src, key.dst)
        } else {
            key.name.clone()
        };
        while names.iter().any(|(_, n)| *n == name) {
            name.push('_');
        }
        names.push((key.clone(), name));
    }
    names
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Infeasibility {
    /// The requirement is at or above what any bounds can approach.
    Supremum {
        sequence: String,
        required: f64,
        supremum: f64,
    },
    /// Reachable in the limit but not with every bound at most `cap`.
    Cap { sequence: String, required: f64, cap: u32 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::Supremum {
                sequence,
                required,
                supremum,
            } => write!(
                f,
                "{sequence} requires {required} but no bounds exceed the supremum {supremum:.6}"
            ),
            Infeasibility::Cap {
                sequence,
                required,
                cap,
            } => {
                write!(f, "{sequence} requires {required}, unreachable with bounds up to {cap}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum BoundsError {
    #[error("sequences need at least two events, got {0}")]
    SequenceTooShort(usize),
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum OptError {
    #[error("specification is not well-posed:\n{0}")]
    NotWellPosed(WellPosednessReport),
    #[error("unrealizable: {0}")]
    Infeasible(Infeasibility),
}

struct Constraint {
    vars: Vec<usize>,
    p: f64,
    label: String,
}

struct Problem {
    names: Vec<String>,
    constraints: Vec<Constraint>,
    /// constraints mentioning each variable
    touching: Vec<Vec<usize>>,
    delta: f64,
    cap: u32,
}

impl Problem {
    fn holds(&self, c: &Constraint, value: impl Fn(usize) -> u32) -> bool {
        if c.p <= 0.0 {
            return true;
        }
        let bounds: Vec<u32> = c.vars.iter().map(|&v| value(v)).collect();
        sync_prob(&bounds, self.delta).expect("well-posed sequences have two events") >= c.p
    }

    /// Smallest value of `var` in `lo..=cap` meeting its constraints, with
    /// the other variables taken from `x`.
    fn min_value(&self, x: &[u32], var: usize, lo: u32) -> u32 {
        let ok = |t: u32| {
            self.touching[var]
                .iter()
                .all(|&c| self.holds(&self.constraints[c], |v| if v == var { t } else { x[v] }))
        };
        let (mut lo, mut hi) = (lo, self.cap);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }
}

/// Minimizes the sum of retransmission bounds subject to every p-sequence of
/// `spec` synchronizing with at least its probability at drop bound `delta`.
///
/// Bounds are limited to `cap`. Among optimal vectors the lexicographically
/// smallest (in [`bound_names`] order) is returned.
pub fn solve_opt(spec: &ProtocolSpec, delta: f64, cap: u32) -> Result<BoundsVector, OptError> {
    let report = spec.well_posed();
    if !report.is_ok() {
        return Err(OptError::NotWellPosed(report));
    }
    let names = bound_names(spec);
    let index_of = |key: &EventKey| names.iter().position(|(k, _)| k == key).expect("every key is named");
    let constraints: Vec<Constraint> = spec
        .sequences()
        .into_iter()
        .map(|seq| Constraint {
            vars: seq.events.iter().map(|e| index_of(&e.key())).collect(),
            p: seq.p,
            label: seq.to_string(),
        })
        .collect();
    let mut touching = vec![Vec::new(); names.len()];
    for (ci, c) in constraints.iter().enumerate() {
        for &v in &c.vars {
            touching[v].push(ci);
        }
    }
    let problem = Problem {
        names: names.into_iter().map(|(_, n)| n).collect(),
        constraints,
        touching,
        delta,
        cap,
    };

    for c in &problem.constraints {
        if c.p > 0.0 && !below_supremum(c.p, delta) {
            return Err(OptError::Infeasible(Infeasibility::Supremum {
                sequence: c.label.clone(),
                required: c.p,
                supremum: sup_sync_prob(delta),
            }));
        }
        if !problem.holds(c, |_| cap) {
            return Err(OptError::Infeasible(Infeasibility::Cap {
                sequence: c.label.clone(),
                required: c.p,
                cap,
            }));
        }
    }

    let n = problem.names.len();
    let at_cap = vec![cap; n];
    let lower: Vec<u32> = (0..n).map(|v| problem.min_value(&at_cap, v, 0)).collect();
    // coordinate descent from the all-cap vector gives a feasible incumbent
    let mut incumbent = at_cap;
    for v in 0..n {
        incumbent[v] = problem.min_value(&incumbent, v, lower[v]);
    }
    let mut search = Search {
        problem: &problem,
        lower_suffix: suffix_sums(&lower),
        lower,
        best_sum: incumbent.iter().map(|&x| x as u64).sum(),
        best: incumbent,
        x: vec![0; n],
    };
    search.branch(0, 0);
    Ok(BoundsVector(
        problem.names.iter().cloned().zip(search.best.iter().copied()).collect(),
    ))
}

fn suffix_sums(v: &[u32]) -> Vec<u64> {
    let mut out = vec![0u64; v.len() + 1];
    for i in (0..v.len()).rev() {
        out[i] = out[i + 1] + v[i] as u64;
    }
    out
}

struct Search<'a> {
    problem: &'a Problem,
    lower: Vec<u32>,
    lower_suffix: Vec<u64>,
    best: Vec<u32>,
    best_sum: u64,
    x: Vec<u32>,
}

impl Search<'_> {
    /// Depth-first over variables in order, values ascending. Constraints
    /// with unassigned variables are checked optimistically at the cap, which
    /// is sound because the probability is monotone in every bound.
    fn branch(&mut self, var: usize, partial: u64) {
        let n = self.x.len();
        if var == n {
            if partial < self.best_sum || (partial == self.best_sum && self.x < self.best) {
                self.best_sum = partial;
                self.best = self.x.clone();
            }
            return;
        }
        let rest = self.lower_suffix[var + 1];
        let cap = self.problem.cap;
        for value in self.lower[var]..=cap {
            if partial + value as u64 + rest > self.best_sum {
                break;
            }
            self.x[var] = value;
            let feasible = self.problem.touching[var].iter().all(|&c| {
                self.problem
                    .holds(&self.problem.constraints[c], |v| if v <= var { self.x[v] } else { cap })
            });
            if feasible {
                self.branch(var + 1, partial + value as u64);
            }
        }
    }
}

/// Whether `spec` admits bounds up to `cap` at drop bound `delta`.
pub fn realizable(spec: &ProtocolSpec, delta: f64, cap: u32) -> bool {
    solve_opt(spec, delta, cap).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::tests::example;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct double sum over the loss counts of both phases.
    fn two_oracle(n1: u32, n2: u32, delta: f64) -> f64 {
        let rho = 1.0 - delta;
        (0..=n1)
            .map(|i| {
                let left = n1 - i;
                let inner: f64 = (0..=left.min(n2)).map(|j| (delta * rho).powi(j as i32)).sum();
                rho * delta.powi(i as i32) * rho * inner
            })
            .sum()
    }

    #[test]
    fn closed_form_reference_value() {
        assert_abs_diff_eq!(sync_prob_two(3, 1, 0.35), 0.781780796875, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_double_sum() {
        for delta in [0.0, 0.1, 0.35, 0.5, 0.9, 1.0] {
            for n1 in 0..8 {
                for n2 in 0..8 {
                    assert_abs_diff_eq!(sync_prob_two(n1, n2, delta), two_oracle(n1, n2, delta), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn chain_recursion_reduces_to_closed_form() {
        for delta in [0.05, 0.35, 0.7] {
            for n1 in 0..6 {
                for n2 in 0..6 {
                    assert_abs_diff_eq!(
                        sync_prob_chain(&[n1, n2], delta),
                        sync_prob_two(n1, n2, delta),
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn chain_reference_value() {
        assert_abs_diff_eq!(sync_prob(&[2, 2, 2], 0.3).unwrap(), 0.790648957, epsilon = 1e-9);
    }

    #[test]
    fn extremes() {
        assert_eq!(sync_prob(&[0, 0, 0], 0.0).unwrap(), 1.0);
        assert_eq!(sync_prob(&[5, 5], 1.0).unwrap(), 0.0);
        assert_eq!(sync_prob(&[1], 0.2), Err(BoundsError::SequenceTooShort(1)));
        assert_abs_diff_eq!(sup_sync_prob(0.35), 0.8414239482200647, epsilon = 1e-12);
    }

    #[test]
    fn example_optimum() {
        let bounds = solve_opt(&example(0.7, 0.8), 0.35, DEFAULT_CAP).unwrap();
        let expected: IndexMap<String, u32> = [("snd", 3), ("ack", 1), ("nack", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(bounds.0, expected);
        assert_eq!(bounds.sum(), 6);
    }

    #[test]
    fn example_optimum_is_unique() {
        let mut optima = Vec::new();
        for s in 0..=8u32 {
            for a in 0..=8u32 {
                for n in 0..=8u32 {
                    if sync_prob_two(s, a, 0.35) >= 0.7 && sync_prob_two(s, n, 0.35) >= 0.8 && s + a + n <= 6 {
                        optima.push((s, a, n));
                    }
                }
            }
        }
        assert_eq!(optima, vec![(3, 1, 2)]);
    }

    #[test]
    fn infeasibility_reasons() {
        let err = solve_opt(&example(0.7, 0.9), 0.35, DEFAULT_CAP).unwrap_err();
        assert!(matches!(err, OptError::Infeasible(Infeasibility::Supremum { .. })));
        let err = solve_opt(&example(0.7, 0.84), 0.35, 2).unwrap_err();
        assert!(matches!(err, OptError::Infeasible(Infeasibility::Cap { cap: 2, .. })));
        let short = ProtocolSpec::leaf(crate::protocol::GlobalEvent::new("e", "A", "B"), 0.5);
        assert!(matches!(solve_opt(&short, 0.1, 8), Err(OptError::NotWellPosed(_))));
    }

    #[test]
    fn zero_requirements_need_no_retransmissions() {
        let bounds = solve_opt(&example(0.0, 0.0), 0.6, DEFAULT_CAP).unwrap();
        assert_eq!(bounds.sum(), 0);
        let bounds = solve_opt(&example(1.0, 1.0), 0.0, DEFAULT_CAP).unwrap();
        assert_eq!(bounds.sum(), 0);
    }

    #[test]
    fn qualified_names_for_ambiguous_events() {
        use crate::parse::parse_protocol;
        let spec = parse_protocol("a A->B . a B->A : 0.5").unwrap();
        let names: Vec<String> = bound_names(&spec).into_iter().map(|(_, n)| n).collect();
        assert_eq!(names, ["a_AB", "a_BA"]);
    }

    fn brute_force(spec: &ProtocolSpec, delta: f64, limit: u32) -> Option<Vec<u32>> {
        let names = bound_names(spec);
        let seqs: Vec<(Vec<usize>, f64)> = spec
            .sequences()
            .iter()
            .map(|s| {
                let vars = s
                    .events
                    .iter()
                    .map(|e| names.iter().position(|(k, _)| *k == e.key()).unwrap())
                    .collect();
                (vars, s.p)
            })
            .collect();
        let n = names.len();
        let mut best: Option<(u32, Vec<u32>)> = None;
        let mut x = vec![0u32; n];
        loop {
            let ok = seqs.iter().all(|(vars, p)| {
                let b: Vec<u32> = vars.iter().map(|&v| x[v]).collect();
                sync_prob(&b, delta).unwrap() >= *p
            });
            let sum: u32 = x.iter().sum();
            if ok && best.as_ref().is_none_or(|(s, _)| sum < *s) {
                best = Some((sum, x.clone()));
            }
            // odometer with the last variable fastest keeps lexicographic order
            let mut i = n;
            loop {
                if i == 0 {
                    return best.map(|(_, v)| v);
                }
                i -= 1;
                if x[i] < limit {
                    x[i] += 1;
                    break;
                }
                x[i] = 0;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn monotone_in_each_bound(b in prop::collection::vec(0u32..8, 2..5), k in 0usize..4, delta in 0.0f64..=1.0) {
            let k = k % b.len();
            let mut up = b.clone();
            up[k] += 1;
            prop_assert!(sync_prob(&up, delta).unwrap() >= sync_prob(&b, delta).unwrap() - 1e-12);
        }

        #[test]
        fn antitone_in_delta(b in prop::collection::vec(0u32..8, 2..5), d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(sync_prob(&b, lo).unwrap() >= sync_prob(&b, hi).unwrap() - 1e-12);
        }

        #[test]
        fn bounded_by_supremum(b in prop::collection::vec(0u32..12, 2..5), delta in 0.0f64..=1.0) {
            let p = sync_prob(&b, delta).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p <= sup_sync_prob(delta) + 1e-12);
        }

        #[test]
        fn optimum_matches_brute_force(p1 in 0u32..=80, p2 in 0u32..=80, delta in prop::sample::select(vec![0.1, 0.25, 0.4])) {
            let spec = example(p1 as f64 / 100.0, p2 as f64 / 100.0);
            let expected = brute_force(&spec, delta, 10);
            match solve_opt(&spec, delta, 10) {
                Ok(bounds) => {
                    let got: Vec<u32> = bounds.0.values().copied().collect();
                    prop_assert_eq!(Some(got), expected);
                }
                Err(_) => prop_assert_eq!(expected, None),
            }
        }

        #[test]
        fn optimum_is_feasible_and_locally_minimal(p1 in 0u32..=83, p2 in 0u32..=83) {
            let (p1, p2) = (p1 as f64 / 100.0, p2 as f64 / 100.0);
            let bounds = solve_opt(&example(p1, p2), 0.35, DEFAULT_CAP).unwrap();
            let v: Vec<u32> = bounds.0.values().copied().collect();
            let ok = |v: &[u32]| sync_prob_two(v[0], v[1], 0.35) >= p1 && sync_prob_two(v[0], v[2], 0.35) >= p2;
            prop_assert!(ok(&v));
            for k in 0..3 {
                if v[k] > 0 {
                    let mut down = v.clone();
                    down[k] -= 1;
                    prop_assert!(!ok(&down));
                }
            }
        }

        #[test]
        fn feasibility_is_downward_closed(p1 in 0u32..=90, p2 in 0u32..=90, q1 in 0u32..=90, q2 in 0u32..=90) {
            let (hi1, lo1) = (p1.max(q1), p1.min(q1));
            let (hi2, lo2) = (p2.max(q2), p2.min(q2));
            let hi = example(hi1 as f64 / 100.0, hi2 as f64 / 100.0);
            let lo = example(lo1 as f64 / 100.0, lo2 as f64 / 100.0);
            if realizable(&hi, 0.35, 64) {
                prop_assert!(realizable(&lo, 0.35, 64));
            }
        }
    }
}
