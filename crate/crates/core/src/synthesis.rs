//! Construction of one CSA per car from a well-posed specification.
//!
//! The construction walks the protocol tree and emits one of four
//! patterns per event, depending on whether the car is the event's sender
//! (with or without a successor event) or its receiver (likewise):
//!
//! * sender, more to come: accept the call, broadcast while the counter is
//!   within bound, re-broadcast on timeout, report `fail` once exhausted;
//! * receiver, more to come: upcall the event on reception;
//! * sender of the last event: as the first, but an echo of the previous
//!   message means the reply was lost and a timeout means `success`;
//! * receiver of the last event: upcall on reception and stop.
//!
//! Retransmission of the previous message by the last sender relies on the
//! map from direction to the latest message, threaded down each path.

use std::collections::HashMap;

use thiserror::Error;

use crate::bounds::{bound_names, solve_opt, BoundsVector, OptError, DEFAULT_CAP};
use crate::csa::{Condition, CounterVar, Csa, LocalEvent, Message, StateId, Transition, TransitionLabel};
use crate::protocol::{CarId, EventKey, FullSpec, GlobalEvent, ProtocolSpec, WellPosednessReport};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SynthesisError {
    #[error("specification is not well-posed:\n{0}")]
    NotWellPosed(WellPosednessReport),
    #[error("no retransmission bound for event `{0}`")]
    MissingBound(String),
    #[error("no earlier message from {to} to {from} to re-send before `{event}`")]
    NoPreviousMessage { event: String, from: CarId, to: CarId },
    #[error("alternatives for car {car} start with the same transition label: {label}")]
    Nondeterministic { car: CarId, label: String },
    #[error(transparent)]
    Bounds(#[from] OptError),
}

/// The automata for every car together with the bounds they were built with.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub bounds: BoundsVector,
    pub csas: Vec<Csa>,
}

/// Partial automaton produced for a sub-specification.
struct Part {
    init: StateId,
    states: Vec<StateId>,
    finals: Vec<StateId>,
    transitions: Vec<Transition>,
}

impl Part {
    fn rename(&mut self, from: StateId, to: StateId) {
        let r = |s: &mut StateId| {
            if *s == from {
                *s = to;
            }
        };
        self.states.retain(|&s| s != from);
        self.finals.iter_mut().for_each(r);
        for t in &mut self.transitions {
            r(&mut t.from);
            r(&mut t.to);
        }
        if self.init == from {
            self.init = to;
        }
    }
}

struct Builder<'a> {
    car: &'a CarId,
    names: HashMap<EventKey, String>,
    bounds: &'a BoundsVector,
}

type LastMessages = HashMap<(CarId, CarId), Message>;

fn s(i: u32) -> StateId {
    StateId(i)
}

fn tr(from: StateId, label: TransitionLabel, to: StateId) -> Transition {
    Transition { from, to, label }
}

impl Builder<'_> {
    fn name(&self, event: &GlobalEvent) -> &str {
        &self.names[&event.key()]
    }

    fn bound(&self, event: &GlobalEvent) -> Result<u32, SynthesisError> {
        let name = self.name(event);
        self.bounds
            .get(name)
            .ok_or_else(|| SynthesisError::MissingBound(name.to_string()))
    }

    fn message(&self, event: &GlobalEvent) -> Message {
        Message {
            id: self.name(event).to_string(),
            src: event.src.clone(),
            dst: event.dst.clone(),
            data: event.data.clone(),
        }
    }

    /// Accept the call at `i`, then broadcast or fail from `i+1`.
    fn sender_prefix(
        &self,
        event: &GlobalEvent,
        i: u32,
        sent: StateId,
        failed: StateId,
    ) -> Result<Vec<Transition>, SynthesisError> {
        let n = self.bound(event)?;
        let var = CounterVar(self.name(event).to_string());
        Ok(vec![
            tr(
                s(i),
                TransitionLabel::Env {
                    event: LocalEvent::env(&event.name, event.dst.clone(), event.data.clone()),
                },
                s(i + 1),
            ),
            tr(
                s(i + 1),
                TransitionLabel::BroadcastCond {
                    msg: self.message(event),
                    cond: Condition::le(var.clone(), n),
                },
                sent,
            ),
            tr(
                s(i + 1),
                TransitionLabel::SysCond {
                    event: LocalEvent::fail(self.name(event), event.dst.clone()),
                    cond: Condition::gt(var, n),
                },
                failed,
            ),
        ])
    }

    fn receiver_step(&self, event: &GlobalEvent, from: StateId, to: StateId) -> Transition {
        tr(
            from,
            TransitionLabel::RecvSys {
                msg: self.message(event),
                event: LocalEvent::sys(&event.name, event.src.clone(), event.data.clone()),
            },
            to,
        )
    }

    fn build(&self, spec: &ProtocolSpec, i: u32, last: &LastMessages) -> Result<(Part, u32), SynthesisError> {
        let x = self.car;
        match spec {
            ProtocolSpec::Or(left, right) => {
                let (mut m1, i1) = self.build(left, i, last)?;
                let (mut m2, i2) = self.build(right, i1, last)?;
                m2.rename(m2.init, m1.init);
                m1.states.extend(m2.states);
                for f in m2.finals {
                    if !m1.finals.contains(&f) {
                        m1.finals.push(f);
                    }
                }
                m1.transitions.extend(m2.transitions);
                Ok((m1, i2))
            }
            ProtocolSpec::Seq { event, rest } => {
                let mut last = last.clone();
                last.insert((event.src.clone(), event.dst.clone()), self.message(event));
                if *x == event.src {
                    let (m, next) = self.build(rest, i + 3, &last)?;
                    let mut transitions = self.sender_prefix(event, i, m.init, s(i + 2))?;
                    transitions.push(tr(
                        m.init,
                        TransitionLabel::TimeoutUpd {
                            var: CounterVar(self.name(event).to_string()),
                        },
                        s(i + 1),
                    ));
                    transitions.extend(m.transitions);
                    let mut states = vec![s(i), s(i + 1), s(i + 2)];
                    states.extend(m.states);
                    Ok((
                        Part {
                            init: s(i),
                            states,
                            finals: m.finals,
                            transitions,
                        },
                        next,
                    ))
                } else if *x == event.dst {
                    let (m, next) = self.build(rest, i + 1, &last)?;
                    let mut transitions = vec![self.receiver_step(event, s(i), m.init)];
                    transitions.extend(m.transitions);
                    let mut states = vec![s(i)];
                    states.extend(m.states);
                    Ok((
                        Part {
                            init: s(i),
                            states,
                            finals: m.finals,
                            transitions,
                        },
                        next,
                    ))
                } else {
                    self.build(rest, i, &last)
                }
            }
            ProtocolSpec::Leaf { event, .. } => {
                if *x == event.src {
                    let echo = last
                        .get(&(event.dst.clone(), event.src.clone()))
                        .cloned()
                        .ok_or_else(|| SynthesisError::NoPreviousMessage {
                            event: event.to_string(),
                            from: event.src.clone(),
                            to: event.dst.clone(),
                        })?;
                    let var = CounterVar(self.name(event).to_string());
                    let mut transitions = self.sender_prefix(event, i, s(i + 2), s(i + 3))?;
                    transitions.push(tr(s(i + 2), TransitionLabel::RecvUpd { msg: echo, var }, s(i + 1)));
                    transitions.push(tr(
                        s(i + 2),
                        TransitionLabel::TimeoutSys {
                            event: LocalEvent::success(self.name(event), event.dst.clone()),
                        },
                        s(i + 4),
                    ));
                    Ok((
                        Part {
                            init: s(i),
                            states: (i..i + 5).map(s).collect(),
                            finals: vec![s(i + 4)],
                            transitions,
                        },
                        i + 5,
                    ))
                } else if *x == event.dst {
                    Ok((
                        Part {
                            init: s(i),
                            states: vec![s(i), s(i + 1)],
                            finals: vec![s(i + 1)],
                            transitions: vec![self.receiver_step(event, s(i), s(i + 1))],
                        },
                        i + 2,
                    ))
                } else {
                    Ok((
                        Part {
                            init: s(i),
                            states: vec![s(i)],
                            finals: vec![s(i)],
                            transitions: Vec::new(),
                        },
                        i + 1,
                    ))
                }
            }
        }
    }
}

/// Builds the CSA of `car` for `spec` with the given retransmission bounds.
/// States are numbered from `s0` in construction order.
pub fn synthesize_for_car(spec: &ProtocolSpec, car: &CarId, bounds: &BoundsVector) -> Result<Csa, SynthesisError> {
    let report = spec.well_posed();
    if !report.is_ok() {
        return Err(SynthesisError::NotWellPosed(report));
    }
    let builder = Builder {
        car,
        names: bound_names(spec).into_iter().collect(),
        bounds,
    };
    let (part, _) = builder.build(spec, 0, &HashMap::new())?;
    let mut csa = Csa::new(car.clone(), part.init);
    csa.states.extend(part.states);
    csa.finals.extend(part.finals);
    csa.vars = part
        .transitions
        .iter()
        .filter_map(|t| t.label.counter().cloned())
        .collect();
    csa.transitions = part.transitions;
    let report = csa.validate();
    if let Some(crate::csa::ValidationIssue::Nondeterministic { label, .. }) = report.issues.first() {
        return Err(SynthesisError::Nondeterministic {
            car: car.clone(),
            label: label.clone(),
        });
    }
    debug_assert!(report.is_ok(), "{report}");
    Ok(csa)
}

/// Solves for optimal bounds at the drop bound of `full` and builds the
/// CSA of every declared car.
pub fn synthesize_all(full: &FullSpec, cap: u32) -> Result<Synthesis, SynthesisError> {
    let report = full.protocol.well_posed();
    if !report.is_ok() {
        return Err(SynthesisError::NotWellPosed(report));
    }
    let bounds = solve_opt(&full.protocol, full.delta, cap)?;
    synthesize_with_bounds(full, bounds)
}

pub fn synthesize_with_bounds(full: &FullSpec, bounds: BoundsVector) -> Result<Synthesis, SynthesisError> {
    let csas = full
        .cars
        .iter()
        .map(|car| synthesize_for_car(&full.protocol, car, &bounds))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Synthesis { bounds, csas })
}

/// [`synthesize_all`] with the default cap.
pub fn synthesize(full: &FullSpec) -> Result<Synthesis, SynthesisError> {
    synthesize_all(full, DEFAULT_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::{CmpOp, Trigger};
    use crate::parse::parse_spec;
    use crate::parse::tests::arb_spec;
    use crate::protocol::tests::example;
    use proptest::prelude::*;

    fn bounds(pairs: &[(&str, u32)]) -> BoundsVector {
        BoundsVector(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    fn example_bounds() -> BoundsVector {
        bounds(&[("snd", 3), ("ack", 1), ("nack", 2)])
    }

    fn label_count(csa: &Csa, pred: impl Fn(&TransitionLabel) -> bool) -> usize {
        csa.transitions.iter().filter(|t| pred(&t.label)).count()
    }

    #[test]
    fn sender_automaton_shape() {
        let a = synthesize_for_car(&example(0.7, 0.8), &CarId::from("A"), &example_bounds()).unwrap();
        assert_eq!(a.states.len(), 6);
        assert_eq!(a.transitions.len(), 6);
        assert_eq!(a.finals.len(), 2);
        assert_eq!(a.init, StateId(0));
        assert!(!a.is_final(a.init));
        assert_eq!(label_count(&a, |l| matches!(l, TransitionLabel::Env { .. })), 1);
        assert_eq!(
            label_count(&a, |l| matches!(l, TransitionLabel::BroadcastCond { .. })),
            1
        );
        assert_eq!(label_count(&a, |l| matches!(l, TransitionLabel::TimeoutUpd { .. })), 1);
        assert_eq!(label_count(&a, |l| matches!(l, TransitionLabel::RecvSys { .. })), 2);
        // both replies leave the shared waiting state
        let waiting: Vec<StateId> = a
            .transitions
            .iter()
            .filter(|t| matches!(t.label, TransitionLabel::RecvSys { .. }))
            .map(|t| t.from)
            .collect();
        assert_eq!(waiting[0], waiting[1]);
        let finals: Vec<StateId> = a
            .transitions
            .iter()
            .filter(|t| matches!(t.label, TransitionLabel::RecvSys { .. }))
            .map(|t| t.to)
            .collect();
        assert!(finals.iter().all(|f| a.is_final(*f)));
        assert!(a.validate().is_ok());
    }

    #[test]
    fn receiver_automaton_shape() {
        let b = synthesize_for_car(&example(0.7, 0.8), &CarId::from("B"), &example_bounds()).unwrap();
        assert_eq!(b.states.len(), 10);
        assert_eq!(b.finals.len(), 2);
        // one reception of snd, then for each reply: call, send, fail, echo, timeout
        assert_eq!(b.transitions.len(), 11);
        assert_eq!(label_count(&b, |l| matches!(l, TransitionLabel::RecvUpd { .. })), 2);
        assert_eq!(label_count(&b, |l| matches!(l, TransitionLabel::TimeoutSys { .. })), 2);
        assert!(b.validate().is_ok());
        let guards: Vec<(String, CmpOp, u32)> = b
            .transitions
            .iter()
            .filter_map(|t| match &t.label {
                TransitionLabel::BroadcastCond { cond, .. } | TransitionLabel::SysCond { cond, .. } => {
                    Some((cond.var.0.clone(), cond.op, cond.bound))
                }
                _ => None,
            })
            .collect();
        assert!(guards.contains(&("ack".into(), CmpOp::Le, 1)));
        assert!(guards.contains(&("ack".into(), CmpOp::Gt, 1)));
        assert!(guards.contains(&("nack".into(), CmpOp::Le, 2)));
        assert!(guards.contains(&("nack".into(), CmpOp::Gt, 2)));
        // the echo re-sends snd
        for t in &b.transitions {
            if let TransitionLabel::RecvUpd { msg, var } = &t.label {
                assert_eq!(msg.id, "snd");
                assert_eq!(msg.data.as_deref(), Some("d"));
                assert!(var.0 == "ack" || var.0 == "nack");
            }
        }
    }

    #[test]
    fn uninvolved_car_gets_trivial_automaton() {
        let full = parse_spec("delta 0.1; cars A B C; snd A->B . ack B->A : 0.5").unwrap();
        let synth = synthesize_all(&full, DEFAULT_CAP).unwrap();
        let c = &synth.csas[2];
        assert_eq!(c.states.len(), 1);
        assert!(c.is_final(c.init));
        assert!(c.transitions.is_empty());
    }

    #[test]
    fn synthesize_all_uses_optimal_bounds() {
        let full = parse_spec("delta 0.35; cars A B; snd A->B(d) . (ack B->A : 0.7 | nack B->A : 0.8)").unwrap();
        let synth = synthesize_all(&full, DEFAULT_CAP).unwrap();
        assert_eq!(synth.bounds, example_bounds());
        assert_eq!(synth.csas.len(), 2);
    }

    #[test]
    fn not_well_posed_is_rejected() {
        let full = parse_spec("delta 0.1; cars A B; e A->B : 0.5").unwrap();
        assert!(matches!(synthesize_all(&full, 8), Err(SynthesisError::NotWellPosed(_))));
    }

    #[test]
    fn missing_bound_is_reported() {
        let err = synthesize_for_car(&example(0.7, 0.8), &CarId::from("B"), &bounds(&[("snd", 1)])).unwrap_err();
        assert_eq!(err, SynthesisError::MissingBound("ack".into()));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a1 = synthesize_for_car(&example(0.7, 0.8), &CarId::from("B"), &example_bounds()).unwrap();
        let a2 = synthesize_for_car(&example(0.7, 0.8), &CarId::from("B"), &example_bounds()).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.to_json(), a2.to_json());
    }

    /// Expected state count from the pattern sizes: three states for a sender
    /// with a successor, one for a receiver with a successor, five and two for
    /// the last sender and receiver, one for an uninvolved leaf, minus one per
    /// choice whose initial states are merged.
    fn expected_states(spec: &ProtocolSpec, car: &CarId) -> usize {
        match spec {
            ProtocolSpec::Or(l, r) => expected_states(l, car) + expected_states(r, car) - 1,
            ProtocolSpec::Seq { event, rest } => {
                let own = if event.src == *car {
                    3
                } else if event.dst == *car {
                    1
                } else {
                    0
                };
                own + expected_states(rest, car)
            }
            ProtocolSpec::Leaf { event, .. } => {
                if event.src == *car {
                    5
                } else if event.dst == *car {
                    2
                } else {
                    1
                }
            }
        }
    }

    fn well_posed_spec() -> impl Strategy<Value = ProtocolSpec> {
        arb_spec().prop_filter("well-posed", |s| s.well_posed().is_ok())
    }

    proptest! {
        #[test]
        fn synthesized_automata_are_valid(spec in well_posed_spec(), n in 0u32..5) {
            let names = bound_names(&spec);
            let bounds = BoundsVector(names.iter().map(|(_, name)| (name.clone(), n)).collect());
            for car in spec.cars() {
                match synthesize_for_car(&spec, &car, &bounds) {
                    Ok(csa) => {
                        prop_assert!(csa.validate().is_ok(), "{}", csa.validate());
                        prop_assert_eq!(csa.states.len(), expected_states(&spec, &car));
                        prop_assert!(csa.states.contains(&csa.init));
                        for t in &csa.transitions {
                            if let TransitionLabel::BroadcastCond { cond, .. } = &t.label {
                                prop_assert_eq!(cond.op, CmpOp::Le);
                                prop_assert_eq!(cond.bound, n);
                            }
                            if let TransitionLabel::SysCond { event, cond } = &t.label {
                                prop_assert_eq!(cond.op, CmpOp::Gt);
                                prop_assert_eq!(event.trigger, Trigger::Sys);
                            }
                        }
                    }
                    Err(SynthesisError::Nondeterministic { .. }) => {}
                    Err(e) => prop_assert!(false, "unexpected error {}", e),
                }
            }
        }
    }
}
