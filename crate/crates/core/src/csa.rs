//! Communication service automata: per-car state machines whose transitions
//! interact with the ASC above (calls and upcalls) and the medium below
//! (broadcasts and receptions), guarded by retransmission counters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::CarId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A retransmission counter, named after the global event it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CounterVar(pub String);

impl fmt::Display for CounterVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ν_{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub var: CounterVar,
    pub op: CmpOp,
    pub bound: u32,
}

impl Condition {
    pub fn le(var: CounterVar, bound: u32) -> Self {
        Condition {
            var,
            op: CmpOp::Le,
            bound,
        }
    }

    pub fn gt(var: CounterVar, bound: u32) -> Self {
        Condition {
            var,
            op: CmpOp::Gt,
            bound,
        }
    }

    pub fn holds(&self, value: u32) -> bool {
        match self.op {
            CmpOp::Le => value <= self.bound,
            CmpOp::Gt => value > self.bound,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
        };
        write!(f, "{} {op} {}", self.var, self.bound)
    }
}

/// A message `m_id` travelling from `src` to `dst`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub src: CarId,
    pub dst: CarId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl Message {
    pub fn broadcast_text(&self) -> String {
        format!("!!m_{} {}->{}{}", self.id, self.src, self.dst, data_suffix(&self.data))
    }

    pub fn reception_text(&self) -> String {
        format!("?m_{} {}<-{}{}", self.id, self.dst, self.src, data_suffix(&self.data))
    }
}

fn data_suffix(data: &Option<String>) -> String {
    data.as_ref().map(|d| format!("({d})")).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Env,
    Sys,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Special {
    Fail,
    Success,
}

/// An event at the interface between a CSA and its ASC.
///
/// `peer` is the other car of the global event. `fail`/`success` upcalls are
/// system-triggered and carry the name of the event they report on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalEvent {
    pub name: String,
    pub peer: CarId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub special: Option<Special>,
}

impl LocalEvent {
    pub fn env(name: impl Into<String>, peer: impl Into<CarId>, data: Option<String>) -> Self {
        LocalEvent {
            name: name.into(),
            peer: peer.into(),
            data,
            trigger: Trigger::Env,
            special: None,
        }
    }

    pub fn sys(name: impl Into<String>, peer: impl Into<CarId>, data: Option<String>) -> Self {
        LocalEvent {
            name: name.into(),
            peer: peer.into(),
            data,
            trigger: Trigger::Sys,
            special: None,
        }
    }

    pub fn fail(name: impl Into<String>, peer: impl Into<CarId>) -> Self {
        LocalEvent {
            special: Some(Special::Fail),
            ..LocalEvent::sys(name, peer, None)
        }
    }

    pub fn success(name: impl Into<String>, peer: impl Into<CarId>) -> Self {
        LocalEvent {
            special: Some(Special::Success),
            ..LocalEvent::sys(name, peer, None)
        }
    }
}

impl fmt::Display for LocalEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.special, self.trigger) {
            (Some(Special::Fail), _) => write!(f, "fail_{}", self.name),
            (Some(Special::Success), _) => write!(f, "success_{}", self.name),
            (None, Trigger::Env) => write!(f, "env {}{} -> {}", self.name, data_suffix(&self.data), self.peer),
            (None, Trigger::Sys) => write!(f, "sys {}{} <- {}", self.name, data_suffix(&self.data), self.peer),
        }
    }
}

/// The seven kinds of transition labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionLabel {
    Env { event: LocalEvent },
    SysCond { event: LocalEvent, cond: Condition },
    TimeoutSys { event: LocalEvent },
    TimeoutUpd { var: CounterVar },
    BroadcastCond { msg: Message, cond: Condition },
    RecvSys { msg: Message, event: LocalEvent },
    RecvUpd { msg: Message, var: CounterVar },
}

impl TransitionLabel {
    /// The counter a label reads or writes, if any.
    pub fn counter(&self) -> Option<&CounterVar> {
        match self {
            TransitionLabel::SysCond { cond, .. } | TransitionLabel::BroadcastCond { cond, .. } => Some(&cond.var),
            TransitionLabel::TimeoutUpd { var } | TransitionLabel::RecvUpd { var, .. } => Some(var),
            _ => None,
        }
    }

    pub fn local_event(&self) -> Option<&LocalEvent> {
        match self {
            TransitionLabel::Env { event }
            | TransitionLabel::SysCond { event, .. }
            | TransitionLabel::TimeoutSys { event }
            | TransitionLabel::RecvSys { event, .. } => Some(event),
            _ => None,
        }
    }

    pub fn message(&self) -> Option<&Message> {
        match self {
            TransitionLabel::BroadcastCond { msg, .. }
            | TransitionLabel::RecvSys { msg, .. }
            | TransitionLabel::RecvUpd { msg, .. } => Some(msg),
            _ => None,
        }
    }
}

impl fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionLabel::Env { event } => write!(f, "{event}"),
            TransitionLabel::SysCond { event, cond } => write!(f, "{event} [{cond}]"),
            TransitionLabel::TimeoutSys { event } => write!(f, "T.O. / {event}"),
            TransitionLabel::TimeoutUpd { var } => write!(f, "T.O. / {var}++"),
            TransitionLabel::BroadcastCond { msg, cond } => write!(f, "{} [{cond}]", msg.broadcast_text()),
            TransitionLabel::RecvSys { msg, event } => write!(f, "{} / {event}", msg.reception_text()),
            TransitionLabel::RecvUpd { msg, var } => write!(f, "{} / {var}++", msg.reception_text()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub from: StateId,
    pub to: StateId,
    pub label: TransitionLabel,
}

/// A communication service automaton `⟨S, V, s_init, S_f, T⟩` owned by one car.
///
/// Counter valuations are not part of the structural states; they live in
/// the runtime configurations of [`crate::semantics`].
#[derive(Clone, Debug, PartialEq)]
pub struct Csa {
    pub owner: CarId,
    pub states: BTreeSet<StateId>,
    pub vars: BTreeSet<CounterVar>,
    pub init: StateId,
    pub finals: BTreeSet<StateId>,
    pub transitions: Vec<Transition>,
}

impl Csa {
    /// A CSA with the single non-final state `init`.
    pub fn new(owner: CarId, init: StateId) -> Self {
        Csa {
            owner,
            states: BTreeSet::from([init]),
            vars: BTreeSet::new(),
            init,
            finals: BTreeSet::new(),
            transitions: Vec::new(),
        }
    }

    pub fn add_state(&mut self, s: StateId) -> &mut Self {
        self.states.insert(s);
        self
    }

    pub fn add_final(&mut self, s: StateId) -> &mut Self {
        self.states.insert(s);
        self.finals.insert(s);
        self
    }

    pub fn add_transition(&mut self, from: StateId, label: TransitionLabel, to: StateId) -> &mut Self {
        self.transitions.push(Transition { from, to, label });
        self
    }

    pub fn is_final(&self, s: StateId) -> bool {
        self.finals.contains(&s)
    }

    pub fn outgoing(&self, s: StateId) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.from == s)
    }

    /// Renames every state through `f`, which must be injective.
    pub fn map_states(&self, f: impl Fn(StateId) -> StateId) -> Csa {
        Csa {
            owner: self.owner.clone(),
            states: self.states.iter().map(|&s| f(s)).collect(),
            vars: self.vars.clone(),
            init: f(self.init),
            finals: self.finals.iter().map(|&s| f(s)).collect(),
            transitions: self
                .transitions
                .iter()
                .map(|t| Transition {
                    from: f(t.from),
                    to: f(t.to),
                    label: t.label.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        if !self.states.contains(&self.init) {
            issues.push(ValidationIssue::UnknownState(self.init));
        }
        for s in &self.finals {
            if !self.states.contains(s) {
                issues.push(ValidationIssue::UnknownState(*s));
            }
        }
        let mut seen: HashMap<(StateId, &TransitionLabel), StateId> = HashMap::new();
        for t in &self.transitions {
            for s in [t.from, t.to] {
                if !self.states.contains(&s) {
                    issues.push(ValidationIssue::DanglingTransition {
                        from: t.from,
                        to: t.to,
                        missing: s,
                    });
                }
            }
            if let Some(var) = t.label.counter() {
                if !self.vars.contains(var) {
                    issues.push(ValidationIssue::UndeclaredCounter(var.clone()));
                }
            }
            if let Some(event) = t.label.local_event() {
                if event.peer == self.owner {
                    issues.push(ValidationIssue::SelfPeer(event.to_string()));
                }
                if event.special.is_some() && event.trigger != Trigger::Sys {
                    issues.push(ValidationIssue::SpecialNotSystemTriggered(event.to_string()));
                }
            }
            match &t.label {
                TransitionLabel::Env { event } if event.trigger != Trigger::Env => {
                    issues.push(ValidationIssue::WrongTrigger(t.label.to_string()));
                }
                TransitionLabel::SysCond { event, .. }
                | TransitionLabel::TimeoutSys { event }
                | TransitionLabel::RecvSys { event, .. }
                    if event.trigger != Trigger::Sys =>
                {
                    issues.push(ValidationIssue::WrongTrigger(t.label.to_string()));
                }
                _ => {}
            }
            match &t.label {
                TransitionLabel::BroadcastCond { msg, .. } if msg.src != self.owner || msg.dst == self.owner => {
                    issues.push(ValidationIssue::MessageEndpoints(msg.broadcast_text()));
                }
                TransitionLabel::RecvSys { msg, .. } | TransitionLabel::RecvUpd { msg, .. }
                    if msg.dst != self.owner || msg.src == self.owner =>
                {
                    issues.push(ValidationIssue::MessageEndpoints(msg.reception_text()));
                }
                _ => {}
            }
            if let Some(&other) = seen.get(&(t.from, &t.label)) {
                if other != t.to {
                    issues.push(ValidationIssue::Nondeterministic {
                        state: t.from,
                        label: t.label.to_string(),
                    });
                }
            } else {
                seen.insert((t.from, &t.label), t.to);
            }
        }
        ValidationReport { issues }
    }

    /// Structural isomorphism: a bijection on states that maps initial to
    /// initial, finals to finals and preserves every labelled transition.
    /// Counters and messages are named after their events, so labels are
    /// compared verbatim.
    pub fn isomorphic(&self, other: &Csa) -> bool {
        if self.states.len() != other.states.len()
            || self.finals.len() != other.finals.len()
            || self.transitions.len() != other.transitions.len()
            || self.vars != other.vars
        {
            return false;
        }
        let a = Shape::of(self);
        let b = Shape::of(other);
        if a.signature_multiset() != b.signature_multiset() {
            return false;
        }
        let mut mapping = Mapping::new(a.n(), b.n());
        if !mapping.assign(&a, &b, a.index[&self.init], b.index[&other.init]) {
            return false;
        }
        extend(&a, &b, &mut mapping)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("digraph \"{}\" {{\n", escape(self.owner.as_str())));
        out.push_str("  node [shape=circle];\n");
        for s in &self.states {
            let mut attrs = Vec::new();
            if *s == self.init {
                attrs.push("shape=doublecircle");
            }
            if self.finals.contains(s) {
                attrs.push("style=dotted");
            }
            if attrs.is_empty() {
                out.push_str(&format!("  {s};\n"));
            } else {
                out.push_str(&format!("  {s} [{}];\n", attrs.join(", ")));
            }
        }
        for t in &self.transitions {
            out.push_str(&format!(
                "  {} -> {} [label=\"{}\"];\n",
                t.from,
                t.to,
                escape(&t.label.to_string())
            ));
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CsaDocument::from(self)).expect("CSA documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Csa, CsaError> {
        let doc: CsaDocument = serde_json::from_str(text)?;
        Ok(doc.into())
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Finality, in-degree and outgoing label counts of one state.
type Signature<'a> = (bool, usize, Vec<(&'a TransitionLabel, usize)>);

/// Dense view of a CSA used by the isomorphism search.
struct Shape<'a> {
    ids: Vec<StateId>,
    index: HashMap<StateId, usize>,
    finals: Vec<bool>,
    out: Vec<BTreeMap<&'a TransitionLabel, Vec<usize>>>,
    in_degree: Vec<usize>,
}

impl<'a> Shape<'a> {
    fn of(csa: &'a Csa) -> Self {
        let ids: Vec<StateId> = csa.states.iter().copied().collect();
        let index: HashMap<StateId, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut out = vec![BTreeMap::<&TransitionLabel, Vec<usize>>::new(); ids.len()];
        let mut in_degree = vec![0; ids.len()];
        for t in &csa.transitions {
            let (Some(&from), Some(&to)) = (index.get(&t.from), index.get(&t.to)) else {
                continue;
            };
            out[from].entry(&t.label).or_default().push(to);
            in_degree[to] += 1;
        }
        let finals = ids.iter().map(|s| csa.finals.contains(s)).collect();
        Shape {
            ids,
            index,
            finals,
            out,
            in_degree,
        }
    }

    fn n(&self) -> usize {
        self.ids.len()
    }

    fn signature(&self, s: usize) -> Signature<'a> {
        (
            self.finals[s],
            self.in_degree[s],
            self.out[s].iter().map(|(l, ts)| (*l, ts.len())).collect(),
        )
    }

    fn signature_multiset(&self) -> Vec<Signature<'a>> {
        let mut v: Vec<_> = (0..self.n()).map(|s| self.signature(s)).collect();
        v.sort();
        v
    }
}

#[derive(Clone)]
struct Mapping {
    fwd: Vec<Option<usize>>,
    bwd: Vec<Option<usize>>,
}

impl Mapping {
    fn new(n: usize, m: usize) -> Self {
        Mapping {
            fwd: vec![None; n],
            bwd: vec![None; m],
        }
    }

    /// Maps `sa` to `sb` and propagates through transitions whose label is
    /// unique at the source, which are forced by determinism.
    fn assign(&mut self, a: &Shape, b: &Shape, sa: usize, sb: usize) -> bool {
        let mut work = vec![(sa, sb)];
        while let Some((x, y)) = work.pop() {
            match (self.fwd[x], self.bwd[y]) {
                (Some(fx), _) if fx == y => continue,
                (None, None) => {}
                _ => return false,
            }
            if a.signature(x) != b.signature(y) {
                return false;
            }
            self.fwd[x] = Some(y);
            self.bwd[y] = Some(x);
            for (label, targets) in &a.out[x] {
                let other = &b.out[y][label];
                if targets.len() == 1 {
                    work.push((targets[0], other[0]));
                }
            }
        }
        true
    }

    fn consistent(&self, a: &Shape, b: &Shape) -> bool {
        // every transition between mapped states must exist on the other side
        for x in 0..a.n() {
            let Some(y) = self.fwd[x] else { continue };
            for (label, targets) in &a.out[x] {
                let mut mapped: Vec<usize> = targets.iter().filter_map(|&t| self.fwd[t]).collect();
                let mut theirs: Vec<usize> = b.out[y][label]
                    .iter()
                    .copied()
                    .filter(|&t| self.bwd[t].is_some())
                    .collect();
                mapped.sort_unstable();
                theirs.sort_unstable();
                if mapped != theirs {
                    return false;
                }
            }
        }
        true
    }
}

fn extend(a: &Shape, b: &Shape, mapping: &mut Mapping) -> bool {
    if !mapping.consistent(a, b) {
        return false;
    }
    let Some(x) = (0..a.n()).find(|&x| mapping.fwd[x].is_none()) else {
        return true;
    };
    for y in 0..b.n() {
        if mapping.bwd[y].is_some() || a.signature(x) != b.signature(y) {
            continue;
        }
        let mut trial = mapping.clone();
        if trial.assign(a, b, x, y) && extend(a, b, &mut trial) {
            *mapping = trial;
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValidationIssue {
    UnknownState(StateId),
    DanglingTransition {
        from: StateId,
        to: StateId,
        missing: StateId,
    },
    UndeclaredCounter(CounterVar),
    SelfPeer(String),
    SpecialNotSystemTriggered(String),
    WrongTrigger(String),
    MessageEndpoints(String),
    Nondeterministic {
        state: StateId,
        label: String,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::UnknownState(s) => write!(f, "state {s} is not declared"),
            ValidationIssue::DanglingTransition { from, to, missing } => {
                write!(f, "transition {from} -> {to} references undeclared state {missing}")
            }
            ValidationIssue::UndeclaredCounter(v) => write!(f, "counter {v} is used but not declared"),
            ValidationIssue::SelfPeer(e) => write!(f, "event `{e}` has the owning car as its peer"),
            ValidationIssue::SpecialNotSystemTriggered(e) => {
                write!(f, "fail/success event `{e}` must be system-triggered")
            }
            ValidationIssue::WrongTrigger(l) => write!(f, "label `{l}` carries an event of the wrong trigger kind"),
            ValidationIssue::MessageEndpoints(m) => write!(f, "message `{m}` does not start or end at the owner"),
            ValidationIssue::Nondeterministic { state, label } => {
                write!(f, "state {state} has several `{label}` transitions")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("valid");
        }
        let lines: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("\n"))
    }
}

#[derive(Debug, Error)]
pub enum CsaError {
    #[error("malformed CSA document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct StateEntry {
    id: StateId,
    #[serde(rename = "final")]
    is_final: bool,
}

/// On-disk layout: `{owner, states: [{id, final}], init, vars, transitions}`.
#[derive(Serialize, Deserialize)]
struct CsaDocument {
    owner: CarId,
    states: Vec<StateEntry>,
    init: StateId,
    vars: Vec<CounterVar>,
    transitions: Vec<Transition>,
}

impl From<&Csa> for CsaDocument {
    fn from(csa: &Csa) -> Self {
        CsaDocument {
            owner: csa.owner.clone(),
            states: csa
                .states
                .iter()
                .map(|&id| StateEntry {
                    id,
                    is_final: csa.finals.contains(&id),
                })
                .collect(),
            init: csa.init,
            vars: csa.vars.iter().cloned().collect(),
            transitions: csa.transitions.clone(),
        }
    }
}

impl From<CsaDocument> for Csa {
    fn from(doc: CsaDocument) -> Self {
        Csa {
            owner: doc.owner,
            states: doc.states.iter().map(|s| s.id).collect(),
            vars: doc.vars.into_iter().collect(),
            init: doc.init,
            finals: doc.states.iter().filter(|s| s.is_final).map(|s| s.id).collect(),
            transitions: doc.transitions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(id: &str, src: &str, dst: &str) -> Message {
        Message {
            id: id.into(),
            src: src.into(),
            dst: dst.into(),
            data: None,
        }
    }

    /// A one-event sender with a retransmission loop bounded by `n`.
    fn sender(n: u32) -> Csa {
        let v = CounterVar("x".into());
        let m = msg("x", "A", "B");
        let mut csa = Csa::new("A".into(), StateId(0));
        csa.vars.insert(v.clone());
        csa.add_state(StateId(1)).add_state(StateId(2)).add_state(StateId(3));
        csa.add_final(StateId(4));
        csa.add_transition(
            StateId(0),
            TransitionLabel::Env {
                event: LocalEvent::env("x", "B", None),
            },
            StateId(1),
        )
        .add_transition(
            StateId(1),
            TransitionLabel::BroadcastCond {
                msg: m,
                cond: Condition::le(v.clone(), n),
            },
            StateId(3),
        )
        .add_transition(
            StateId(1),
            TransitionLabel::SysCond {
                event: LocalEvent::fail("x", "B"),
                cond: Condition::gt(v.clone(), n),
            },
            StateId(2),
        )
        .add_transition(StateId(3), TransitionLabel::TimeoutUpd { var: v }, StateId(1))
        .add_transition(
            StateId(3),
            TransitionLabel::TimeoutSys {
                event: LocalEvent::success("x", "B"),
            },
            StateId(4),
        );
        csa
    }

    #[test]
    fn hand_built_sender_is_valid() {
        assert!(sender(2).validate().is_ok());
    }

    #[test]
    fn renaming_preserves_isomorphism() {
        let a = sender(2);
        let b = a.map_states(|s| StateId(100 - s.0 * 7));
        assert!(a.isomorphic(&b));
        assert!(b.isomorphic(&a));
    }

    #[test]
    fn different_bounds_are_not_isomorphic() {
        assert!(!sender(2).isomorphic(&sender(3)));
    }

    #[test]
    fn redirected_edge_is_not_isomorphic() {
        let a = sender(2);
        let mut b = a.clone();
        let loop_edge = b
            .transitions
            .iter_mut()
            .find(|t| matches!(t.label, TransitionLabel::TimeoutUpd { .. }))
            .unwrap();
        loop_edge.to = StateId(0);
        assert!(!a.isomorphic(&b));
    }

    #[test]
    fn moved_final_is_not_isomorphic() {
        let a = sender(2);
        let mut b = a.clone();
        b.finals = BTreeSet::from([StateId(2)]);
        assert!(!a.isomorphic(&b));
    }

    #[test]
    fn json_round_trip() {
        let a = sender(3);
        let back = Csa::from_json(&a.to_json()).unwrap();
        assert_eq!(a, back);
        assert!(Csa::from_json("{\"owner\": 1}").is_err());
    }

    #[test]
    fn dot_lists_every_state_and_edge() {
        let dot = sender(1).to_dot();
        assert!(dot.starts_with("digraph \"A\" {\n"));
        assert_eq!(dot.matches("[label=").count(), 5);
        assert!(dot.contains("s0 [shape=doublecircle];"));
        assert!(dot.contains("s4 [style=dotted];"));
        assert!(dot.contains("[label=\"!!m_x A->B [ν_x <= 1]\"]"));
        let declared = dot
            .lines()
            .filter(|l| l.trim_start().starts_with('s') && !l.contains("->"))
            .count();
        assert_eq!(declared, 5);
    }

    #[test]
    fn validation_reports_each_defect() {
        let mut csa = sender(1);
        csa.vars.clear();
        csa.add_transition(
            StateId(4),
            TransitionLabel::Env {
                event: LocalEvent::env("y", "A", None),
            },
            StateId(9),
        );
        csa.add_transition(
            StateId(0),
            TransitionLabel::Env {
                event: LocalEvent::sys("x", "B", None),
            },
            StateId(1),
        );
        csa.add_transition(
            StateId(3),
            TransitionLabel::BroadcastCond {
                msg: msg("x", "B", "A"),
                cond: Condition::le(CounterVar("x".into()), 1),
            },
            StateId(1),
        );
        let issues = csa.validate().issues;
        assert!(issues.contains(&ValidationIssue::UndeclaredCounter(CounterVar("x".into()))));
        assert!(issues.contains(&ValidationIssue::DanglingTransition {
            from: StateId(4),
            to: StateId(9),
            missing: StateId(9)
        }));
        assert!(issues.iter().any(|i| matches!(i, ValidationIssue::SelfPeer(_))));
        assert!(issues.iter().any(|i| matches!(i, ValidationIssue::WrongTrigger(_))));
        assert!(issues.iter().any(|i| matches!(i, ValidationIssue::MessageEndpoints(_))));
    }

    #[test]
    fn duplicate_label_with_different_targets_is_nondeterministic() {
        let mut csa = sender(1);
        csa.add_transition(
            StateId(0),
            TransitionLabel::Env {
                event: LocalEvent::env("x", "B", None),
            },
            StateId(2),
        );
        assert!(matches!(
            csa.validate().issues.as_slice(),
            [ValidationIssue::Nondeterministic { state: StateId(0), .. }]
        ));
    }

    proptest! {
        #[test]
        fn any_relabelling_is_isomorphic(perm in Just((0u32..5).collect::<Vec<_>>()).prop_shuffle(),
                                         order in Just((0usize..5).collect::<Vec<_>>()).prop_shuffle(),
                                         n in 0u32..6) {
            let a = sender(n);
            let mut b = a.map_states(|s| StateId(10 + perm[s.0 as usize]));
            b.transitions = order.iter().map(|&i| b.transitions[i].clone()).collect();
            prop_assert!(a.isomorphic(&b));
            prop_assert!(b.isomorphic(&a));
            prop_assert!(b.isomorphic(&b));
            let c = b.map_states(|s| StateId(s.0 * 3));
            prop_assert!(a.isomorphic(&c));
        }
    }
}
