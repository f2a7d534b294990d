//! Protocol specifications: global events, the tree-shaped specification
//! language, p-sequences and the satisfaction relation between them.
//!
//! A specification is a tree whose edges are global events and whose leaves
//! carry the probability with which the root-to-leaf sequence has to be
//! synchronized. The concrete text format is handled in [`crate::parse`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of a car taking part in a protocol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CarId(String);

impl CarId {
    pub fn new(name: impl Into<String>) -> Result<Self, SpecError> {
        let name = name.into();
        if name.is_empty() {
            return Err(SpecError::EmptyCarName);
        }
        Ok(CarId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for CarId {
    /// Panics on the empty string; intended for literals.
    fn from(name: &str) -> Self {
        CarId::new(name).expect("car names must be nonempty")
    }
}

impl fmt::Display for CarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The identity of a global event for synthesis purposes: one message, one
/// counter and one retransmission bound exist per key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventKey {
    pub name: String,
    pub src: CarId,
    pub dst: CarId,
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}->{}", self.name, self.src, self.dst)
    }
}

/// A global event `name src->dst(data)`: the synchronization of an
/// environment-triggered event on `src` with a system-triggered event on `dst`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalEvent {
    pub name: String,
    pub src: CarId,
    pub dst: CarId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl GlobalEvent {
    pub fn new(name: impl Into<String>, src: impl Into<CarId>, dst: impl Into<CarId>) -> Self {
        GlobalEvent {
            name: name.into(),
            src: src.into(),
            dst: dst.into(),
            data: None,
        }
    }

    pub fn with_data(mut self, data: impl Into<String>) -> Self {
        self.data = Some(data.into());
        self
    }

    pub fn key(&self) -> EventKey {
        EventKey {
            name: self.name.clone(),
            src: self.src.clone(),
            dst: self.dst.clone(),
        }
    }
}

impl fmt::Display for GlobalEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}->{}", self.name, self.src, self.dst)?;
        if let Some(data) = &self.data {
            write!(f, "({data})")?;
        }
        Ok(())
    }
}

/// Violations of the structural invariants of a specification.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum SpecError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("drop probability bound {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("event `{0}` has the same source and destination")]
    SameEndpoints(String),
    #[error("car `{0}` is not declared")]
    UnknownCar(String),
    #[error("car `{0}` is declared twice")]
    DuplicateCar(String),
    #[error("event `{0}` occurs twice on one path")]
    DuplicateEventOnPath(String),
    #[error("car names must be nonempty")]
    EmptyCarName,
}

/// The protocol specification language: a leaf event with a required
/// probability, an event followed by a sub-specification, or a choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProtocolSpec {
    Leaf {
        event: GlobalEvent,
        p: f64,
    },
    Seq {
        event: GlobalEvent,
        rest: Box<ProtocolSpec>,
    },
    Or(Box<ProtocolSpec>, Box<ProtocolSpec>),
}

impl ProtocolSpec {
    pub fn leaf(event: GlobalEvent, p: f64) -> Self {
        ProtocolSpec::Leaf { event, p }
    }

    pub fn seq(event: GlobalEvent, rest: ProtocolSpec) -> Self {
        ProtocolSpec::Seq {
            event,
            rest: Box::new(rest),
        }
    }

    pub fn or(left: ProtocolSpec, right: ProtocolSpec) -> Self {
        ProtocolSpec::Or(Box::new(left), Box::new(right))
    }

    /// Checks leaf probabilities, distinct endpoints and that no event key
    /// repeats along a root-to-leaf path.
    pub fn validate(&self) -> Result<(), SpecError> {
        fn go<'a>(spec: &'a ProtocolSpec, path: &mut Vec<&'a GlobalEvent>) -> Result<(), SpecError> {
            match spec {
                ProtocolSpec::Leaf { event, p } => {
                    check_event(event, path)?;
                    check_probability(*p)
                }
                ProtocolSpec::Seq { event, rest } => {
                    check_event(event, path)?;
                    path.push(event);
                    let result = go(rest, path);
                    path.pop();
                    result
                }
                ProtocolSpec::Or(left, right) => {
                    go(left, path)?;
                    go(right, path)
                }
            }
        }
        go(self, &mut Vec::new())
    }

    /// The set of root-to-leaf p-sequences, in depth-first order, with exact
    /// duplicates collapsed.
    pub fn sequences(&self) -> Vec<PSequence> {
        fn go(spec: &ProtocolSpec, prefix: &mut Vec<GlobalEvent>, out: &mut Vec<PSequence>) {
            match spec {
                ProtocolSpec::Leaf { event, p } => {
                    let mut events = prefix.clone();
                    events.push(event.clone());
                    let seq = PSequence { events, p: *p };
                    if !out.contains(&seq) {
                        out.push(seq);
                    }
                }
                ProtocolSpec::Seq { event, rest } => {
                    prefix.push(event.clone());
                    go(rest, prefix, out);
                    prefix.pop();
                }
                ProtocolSpec::Or(left, right) => {
                    go(left, prefix, out);
                    go(right, prefix, out);
                }
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    /// The satisfaction relation `(σ)^p ⊨ φ`, following the three recursive
    /// clauses literally: sequences containing events not in `φ` never satisfy.
    pub fn is_satisfied_by(&self, events: &[GlobalEvent], p: f64) -> bool {
        match self {
            ProtocolSpec::Leaf { event, p: q } => events.len() == 1 && events[0] == *event && p >= *q,
            ProtocolSpec::Seq { event, rest } => match events.split_first() {
                Some((head, tail)) => head == event && rest.is_satisfied_by(tail, p),
                None => false,
            },
            ProtocolSpec::Or(left, right) => left.is_satisfied_by(events, p) || right.is_satisfied_by(events, p),
        }
    }

    pub fn satisfies(&self, pseq: &PSequence) -> bool {
        self.is_satisfied_by(&pseq.events, pseq.p)
    }

    /// Distinct event keys in depth-first order of first occurrence.
    pub fn event_keys(&self) -> Vec<EventKey> {
        let mut keys: Vec<EventKey> = Vec::new();
        self.visit_events(&mut |event| {
            let key = event.key();
            if !keys.contains(&key) {
                keys.push(key);
            }
        });
        keys
    }

    /// Cars mentioned by any event, in depth-first order of first occurrence.
    pub fn cars(&self) -> Vec<CarId> {
        let mut cars: Vec<CarId> = Vec::new();
        self.visit_events(&mut |event| {
            for car in [&event.src, &event.dst] {
                if !cars.contains(car) {
                    cars.push(car.clone());
                }
            }
        });
        cars
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ProtocolSpec::Leaf { .. } => 1,
            ProtocolSpec::Seq { rest, .. } => rest.leaf_count(),
            ProtocolSpec::Or(left, right) => left.leaf_count() + right.leaf_count(),
        }
    }

    fn visit_events<'a>(&'a self, f: &mut impl FnMut(&'a GlobalEvent)) {
        match self {
            ProtocolSpec::Leaf { event, .. } => f(event),
            ProtocolSpec::Seq { event, rest } => {
                f(event);
                rest.visit_events(f);
            }
            ProtocolSpec::Or(left, right) => {
                left.visit_events(f);
                right.visit_events(f);
            }
        }
    }

    /// Two ASCs must take turns triggering the events of every sequence, and
    /// every sequence must contain at least two events.
    pub fn well_posed(&self) -> WellPosednessReport {
        let mut violations = Vec::new();
        for seq in self.sequences() {
            let path: Vec<String> = seq.events.iter().map(ToString::to_string).collect();
            if seq.events.len() < 2 {
                violations.push(Violation {
                    path: path.clone(),
                    kind: ViolationKind::TooShort { len: seq.events.len() },
                });
            }
            for (k, pair) in seq.events.windows(2).enumerate() {
                let (prev, next) = (&pair[0], &pair[1]);
                if next.src != prev.dst || next.dst != prev.src {
                    violations.push(Violation {
                        path: path.clone(),
                        kind: ViolationKind::TurnTaking {
                            position: k + 1,
                            expected_src: prev.dst.clone(),
                            expected_dst: prev.src.clone(),
                            found: next.clone(),
                        },
                    });
                }
            }
        }
        WellPosednessReport { violations }
    }
}

fn check_probability(p: f64) -> Result<(), SpecError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SpecError::ProbabilityOutOfRange(p))
    }
}

fn check_event(event: &GlobalEvent, path: &[&GlobalEvent]) -> Result<(), SpecError> {
    if event.src == event.dst {
        return Err(SpecError::SameEndpoints(event.to_string()));
    }
    let key = event.key();
    if path.iter().any(|e| e.key() == key) {
        return Err(SpecError::DuplicateEventOnPath(key.to_string()));
    }
    Ok(())
}

impl fmt::Display for ProtocolSpec {
    /// Prints the concrete syntax accepted by [`crate::parse::parse_protocol`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolSpec::Leaf { event, p } => write!(f, "{event} : {p}"),
            ProtocolSpec::Seq { event, rest } => match **rest {
                ProtocolSpec::Or(..) => write!(f, "{event} . ({rest})"),
                _ => write!(f, "{event} . {rest}"),
            },
            ProtocolSpec::Or(left, right) => {
                match **left {
                    ProtocolSpec::Leaf { .. } => write!(f, "{left}")?,
                    _ => write!(f, "({left})")?,
                }
                write!(f, " | {right}")
            }
        }
    }
}

/// A sequence of global events with a probability attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PSequence {
    pub events: Vec<GlobalEvent>,
    pub p: f64,
}

impl fmt::Display for PSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, e) in self.events.iter().enumerate() {
            if i > 0 {
                f.write_str(" · ")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")^{}", self.p)
    }
}

/// A protocol specification with its environment assumption `□(Δ ≤ δ)` and
/// the set of cars to synthesize for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullSpec {
    pub protocol: ProtocolSpec,
    pub delta: f64,
    pub cars: Vec<CarId>,
}

impl FullSpec {
    pub fn new(protocol: ProtocolSpec, delta: f64, cars: Vec<CarId>) -> Result<Self, SpecError> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(SpecError::DeltaOutOfRange(delta));
        }
        for (i, car) in cars.iter().enumerate() {
            if cars[..i].contains(car) {
                return Err(SpecError::DuplicateCar(car.to_string()));
            }
        }
        protocol.validate()?;
        if let Some(unknown) = protocol.cars().into_iter().find(|c| !cars.contains(c)) {
            return Err(SpecError::UnknownCar(unknown.to_string()));
        }
        Ok(FullSpec { protocol, delta, cars })
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self, SpecError> {
        FullSpec::new(self.protocol.clone(), delta, self.cars.clone())
    }
}

impl fmt::Display for FullSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "delta {}; cars", self.delta)?;
        for car in &self.cars {
            write!(f, " {car}")?;
        }
        write!(f, "; {}", self.protocol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    TooShort {
        len: usize,
    },
    TurnTaking {
        /// Index of the offending event within the path.
        position: usize,
        expected_src: CarId,
        expected_dst: CarId,
        found: GlobalEvent,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: Vec<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "path [{}]: ", self.path.join(" . "))?;
        match &self.kind {
            ViolationKind::TooShort { len } => write!(
                f,
                "path length {len} < 2 (there must be at least two events on each path)"
            ),
            ViolationKind::TurnTaking {
                position,
                expected_src,
                expected_dst,
                found,
            } => {
                if found.src != *expected_src && found.src == *expected_dst {
                    write!(f, "turn-taking: {} triggers twice", found.src)?;
                } else {
                    write!(
                        f,
                        "turn-taking: event {} `{found}` is not a reply {expected_src}->{expected_dst}",
                        position + 1
                    )?;
                }
                f.write_str(" (two ASCs must take turns in triggering the events)")
            }
        }
    }
}

/// Outcome of the well-posedness check; violations are data, not errors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WellPosednessReport {
    pub violations: Vec<Violation>,
}

impl WellPosednessReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for WellPosednessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("well-posed");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
