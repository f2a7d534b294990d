//! Operational semantics of a network of CSAs over a lossy broadcast medium.
//!
//! Local rules move one CSA; global rules interleave them, deliver or drop
//! the pending broadcast and hand priority between cars. The exact
//! probability that a network synchronizes a sequence is computed by
//! exhaustive, memoized exploration of the global deduction graph; Monte
//! Carlo sampling walks single paths through the same graph.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::csa::{CmpOp, CounterVar, Csa, LocalEvent, Message, StateId, TransitionLabel, Trigger, ValidationReport};
use crate::protocol::{CarId, GlobalEvent, PSequence, ProtocolSpec};

/// Default limit on the number of configurations explored per query.
pub const DEFAULT_BUDGET: usize = 10_000_000;

/// Slack granted when comparing an exact probability with a requirement, to
/// absorb floating-point differences between summation orders.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalRule {
    Env,
    SysC,
    ToSys,
    ToUpd,
    BC,
    RSys,
    RUpd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalRule {
    Trans,
    Drop,
    Nacc,
    PrE,
    PrT,
    Npr,
}

/// One element of a deduced sequence `ρ`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceItem {
    Env { car: CarId, event: LocalEvent },
    Sys { car: CarId, event: LocalEvent },
    Timeout { car: CarId },
    Broadcast { msg: Message },
    Receive { msg: Message },
}

impl TraceItem {
    pub fn car(&self) -> &CarId {
        match self {
            TraceItem::Env { car, .. } | TraceItem::Sys { car, .. } | TraceItem::Timeout { car } => car,
            TraceItem::Broadcast { msg } => &msg.src,
            TraceItem::Receive { msg } => &msg.dst,
        }
    }
}

impl fmt::Display for TraceItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceItem::Env { car, event } | TraceItem::Sys { car, event } => write!(f, "{car}: {event}"),
            TraceItem::Timeout { car } => write!(f, "{car}: T.O."),
            TraceItem::Broadcast { msg } => f.write_str(&msg.broadcast_text()),
            TraceItem::Receive { msg } => f.write_str(&msg.reception_text()),
        }
    }
}

/// Counter values of one CSA; absent counters read as zero.
pub type Valuation = BTreeMap<CounterVar, u32>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalConfig {
    pub state: StateId,
    pub valuation: Valuation,
}

impl LocalConfig {
    pub fn initial(csa: &Csa) -> Self {
        LocalConfig {
            state: csa.init,
            valuation: csa.vars.iter().map(|v| (v.clone(), 0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalStep {
    pub rule: LocalRule,
    pub emitted: Vec<TraceItem>,
    pub next: LocalConfig,
}

/// `⟨(ρ)^p, s, x⟩`: the sequence so far, one local configuration per CSA,
/// the car holding priority and the probability of the deduction.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalConfig {
    pub rho: Vec<TraceItem>,
    pub locals: Vec<LocalConfig>,
    pub priority: CarId,
    pub prob: f64,
}

impl GlobalConfig {
    /// Every CSA in its initial state; priority goes to the car making the
    /// first call of the scenario.
    pub fn initial(csas: &[Csa], scenario: &Scenario) -> Self {
        let priority = scenario
            .calls
            .first()
            .map(|e| e.src.clone())
            .or_else(|| csas.first().map(|c| c.owner.clone()))
            .unwrap_or_else(|| CarId::from("_"));
        GlobalConfig {
            rho: Vec::new(),
            locals: csas.iter().map(LocalConfig::initial).collect(),
            priority,
            prob: 1.0,
        }
    }
}

/// The environment calls the ASCs make, in order. For a target sequence the
/// calls are its events, which also resolves every choice between branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub calls: Vec<GlobalEvent>,
}

impl Scenario {
    pub fn for_sequence(sigma: &[GlobalEvent]) -> Self {
        Scenario { calls: sigma.to_vec() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    Budget,
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SemanticsError {
    #[error("CSA of car {owner} is invalid:\n{report}")]
    InvalidCsa { owner: CarId, report: ValidationReport },
    #[error("two CSAs are owned by car {0}")]
    DuplicateOwner(CarId),
    #[error("car {owner} has no state {state}")]
    UnknownState { owner: CarId, state: StateId },
    #[error("car {0} has no CSA")]
    UnknownCar(CarId),
    #[error("drop probability {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("exploration diverges after {explored} configurations ({reason:?})")]
    DivergenceDetected { explored: usize, reason: DivergenceReason },
}

/// Result of projecting a trace onto global events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Projected {
    Global(GlobalEvent),
    /// An environment call whose system-triggered counterpart never followed.
    Unsynchronized(GlobalEvent),
}

/// Fuses each environment call with the system-triggered event that
/// immediately matches it; other items are dropped.
///
/// A system-triggered event that does not match a pending call closes it,
/// so a global event never spans another upcall.
pub fn project(rho: &[TraceItem]) -> Vec<Projected> {
    let mut out = Vec::new();
    let mut open = false;
    for item in rho {
        match item {
            TraceItem::Env { car, event } if event.trigger == Trigger::Env && event.special.is_none() => {
                out.push(Projected::Unsynchronized(GlobalEvent {
                    name: event.name.clone(),
                    src: car.clone(),
                    dst: event.peer.clone(),
                    data: event.data.clone(),
                }));
                open = true;
            }
            TraceItem::Sys { car, event } => {
                if open {
                    if let Some(Projected::Unsynchronized(g)) = out.last() {
                        if sys_matches(g, car, event) {
                            let g = g.clone();
                            *out.last_mut().expect("nonempty") = Projected::Global(g);
                        }
                    }
                }
                open = false;
            }
            _ => {}
        }
    }
    out
}

fn env_matches(g: &GlobalEvent, car: &CarId, event: &LocalEvent) -> bool {
    event.trigger == Trigger::Env
        && event.special.is_none()
        && g.src == *car
        && g.dst == event.peer
        && g.name == event.name
        && g.data == event.data
}

fn sys_matches(g: &GlobalEvent, car: &CarId, event: &LocalEvent) -> bool {
    event.trigger == Trigger::Sys
        && event.special.is_none()
        && g.dst == *car
        && g.src == event.peer
        && g.name == event.name
        && g.data == event.data
}

/// Incremental form of `project(ρ) == σ`: `k` events of `σ` are fused and
/// `pending` marks an open call for `σ[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Track {
    Alive { k: u32, pending: bool },
    Dead,
}

impl Track {
    const START: Track = Track::Alive { k: 0, pending: false };

    fn advance(self, item: &TraceItem, sigma: &[GlobalEvent]) -> Track {
        let Track::Alive { k, pending } = self else {
            return Track::Dead;
        };
        match item {
            TraceItem::Env { car, event } if event.trigger == Trigger::Env && event.special.is_none() => {
                match sigma.get(k as usize) {
                    Some(g) if !pending && env_matches(g, car, event) => Track::Alive { k, pending: true },
                    _ => Track::Dead,
                }
            }
            TraceItem::Sys { car, event } if pending => {
                if sys_matches(&sigma[k as usize], car, event) {
                    Track::Alive {
                        k: k + 1,
                        pending: false,
                    }
                } else {
                    Track::Dead
                }
            }
            _ => self,
        }
    }

    fn complete(self, sigma: &[GlobalEvent]) -> bool {
        self == Track::Alive {
            k: sigma.len() as u32,
            pending: false,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Env(LocalEvent),
    SysCond {
        var: usize,
        op: CmpOp,
        bound: u32,
    },
    TimeoutSys,
    TimeoutUpd {
        var: usize,
    },
    Broadcast {
        var: usize,
        op: CmpOp,
        bound: u32,
        msg: u32,
    },
    RecvSys {
        msg: u32,
    },
    RecvUpd {
        msg: u32,
        var: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    E,
    T,
    R(u32),
}

#[derive(Clone, Debug)]
struct Move {
    op: Op,
    to: u32,
    emit: Vec<TraceItem>,
}

impl Move {
    fn class(&self) -> Class {
        match self.op {
            Op::Env(_) | Op::SysCond { .. } | Op::Broadcast { .. } => Class::E,
            Op::TimeoutSys | Op::TimeoutUpd { .. } => Class::T,
            Op::RecvSys { msg } | Op::RecvUpd { msg, .. } => Class::R(msg),
        }
    }

    fn rule(&self) -> LocalRule {
        match self.op {
            Op::Env(_) => LocalRule::Env,
            Op::SysCond { .. } => LocalRule::SysC,
            Op::TimeoutSys => LocalRule::ToSys,
            Op::TimeoutUpd { .. } => LocalRule::ToUpd,
            Op::Broadcast { .. } => LocalRule::BC,
            Op::RecvSys { .. } => LocalRule::RSys,
            Op::RecvUpd { .. } => LocalRule::RUpd,
        }
    }

    fn enabled(&self, vals: &[u32]) -> bool {
        let guard = |var: usize, op: CmpOp, bound: u32| match op {
            CmpOp::Le => vals[var] <= bound,
            CmpOp::Gt => vals[var] > bound,
        };
        match self.op {
            Op::SysCond { var, op, bound } | Op::Broadcast { var, op, bound, .. } => guard(var, op, bound),
            _ => true,
        }
    }
}

/// A CSA with dense state and counter indices.
struct Compiled {
    owner: CarId,
    ids: Vec<StateId>,
    index: HashMap<StateId, u32>,
    finals: Vec<bool>,
    vars: Vec<CounterVar>,
    moves: Vec<Vec<Move>>,
    init: u32,
}

struct Messages {
    list: Vec<Message>,
    index: HashMap<Message, u32>,
}

impl Messages {
    fn intern(&mut self, m: &Message) -> u32 {
        if let Some(&i) = self.index.get(m) {
            return i;
        }
        let i = self.list.len() as u32;
        self.list.push(m.clone());
        self.index.insert(m.clone(), i);
        i
    }
}

impl Compiled {
    fn new(csa: &Csa, messages: &mut Messages) -> Result<Self, SemanticsError> {
        let report = csa.validate();
        if !report.is_ok() {
            return Err(SemanticsError::InvalidCsa {
                owner: csa.owner.clone(),
                report,
            });
        }
        let ids: Vec<StateId> = csa.states.iter().copied().collect();
        let index: HashMap<StateId, u32> = ids.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
        let vars: Vec<CounterVar> = csa.vars.iter().cloned().collect();
        let var_index: HashMap<CounterVar, usize> = vars.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        let mut moves = vec![Vec::new(); ids.len()];
        let car = csa.owner.clone();
        for t in &csa.transitions {
            let (op, emit) = match &t.label {
                TransitionLabel::Env { event } => (
                    Op::Env(event.clone()),
                    vec![TraceItem::Env {
                        car: car.clone(),
                        event: event.clone(),
                    }],
                ),
                TransitionLabel::SysCond { event, cond } => (
                    Op::SysCond {
                        var: var_index[&cond.var],
                        op: cond.op,
                        bound: cond.bound,
                    },
                    vec![TraceItem::Sys {
                        car: car.clone(),
                        event: event.clone(),
                    }],
                ),
                TransitionLabel::TimeoutSys { event } => (
                    Op::TimeoutSys,
                    vec![
                        TraceItem::Timeout { car: car.clone() },
                        TraceItem::Sys {
                            car: car.clone(),
                            event: event.clone(),
                        },
                    ],
                ),
                TransitionLabel::TimeoutUpd { var } => (
                    Op::TimeoutUpd { var: var_index[var] },
                    vec![TraceItem::Timeout { car: car.clone() }],
                ),
                TransitionLabel::BroadcastCond { msg, cond } => (
                    Op::Broadcast {
                        var: var_index[&cond.var],
                        op: cond.op,
                        bound: cond.bound,
                        msg: messages.intern(msg),
                    },
                    vec![TraceItem::Broadcast { msg: msg.clone() }],
                ),
                TransitionLabel::RecvSys { msg, event } => (
                    Op::RecvSys {
                        msg: messages.intern(msg),
                    },
                    vec![
                        TraceItem::Receive { msg: msg.clone() },
                        TraceItem::Sys {
                            car: car.clone(),
                            event: event.clone(),
                        },
                    ],
                ),
                TransitionLabel::RecvUpd { msg, var } => (
                    Op::RecvUpd {
                        msg: messages.intern(msg),
                        var: var_index[var],
                    },
                    vec![TraceItem::Receive { msg: msg.clone() }],
                ),
            };
            moves[index[&t.from] as usize].push(Move {
                op,
                to: index[&t.to],
                emit,
            });
        }
        Ok(Compiled {
            owner: csa.owner.clone(),
            finals: ids.iter().map(|s| csa.finals.contains(s)).collect(),
            init: index[&csa.init],
            ids,
            index,
            vars,
            moves,
        })
    }

    fn state_index(&self, s: StateId) -> Result<u32, SemanticsError> {
        self.index.get(&s).copied().ok_or_else(|| SemanticsError::UnknownState {
            owner: self.owner.clone(),
            state: s,
        })
    }

    fn valuation(&self, vals: &[u32]) -> Valuation {
        self.vars.iter().cloned().zip(vals.iter().copied()).collect()
    }

    fn dense_valuation(&self, valuation: &Valuation) -> Vec<u32> {
        self.vars
            .iter()
            .map(|v| valuation.get(v).copied().unwrap_or(0))
            .collect()
    }
}

/// Applies a move to a dense local configuration.
fn apply_local(m: &Move, vals: &mut [u32]) -> u32 {
    match m.op {
        Op::TimeoutUpd { var } | Op::RecvUpd { var, .. } => vals[var] += 1,
        _ => {}
    }
    m.to
}

/// All local successors of `cfg`: with `input` only the receptions of that
/// message, otherwise every enabled call, upcall, timeout and broadcast.
pub fn local_steps(csa: &Csa, cfg: &LocalConfig, input: Option<&Message>) -> Result<Vec<LocalStep>, SemanticsError> {
    let mut messages = Messages {
        list: Vec::new(),
        index: HashMap::new(),
    };
    let comp = Compiled::new(csa, &mut messages)?;
    let state = comp.state_index(cfg.state)?;
    let vals = comp.dense_valuation(&cfg.valuation);
    let wanted = input.map(|m| messages.index.get(m).copied());
    let mut out = Vec::new();
    for m in &comp.moves[state as usize] {
        let take = match (m.class(), wanted) {
            (Class::R(id), Some(Some(w))) => id == w,
            (Class::R(_), _) | (_, Some(_)) => false,
            (_, None) => m.enabled(&vals),
        };
        if take {
            let mut next_vals = vals.clone();
            let to = apply_local(m, &mut next_vals);
            out.push(LocalStep {
                rule: m.rule(),
                emitted: m.emit.clone(),
                next: LocalConfig {
                    state: comp.ids[to as usize],
                    valuation: comp.valuation(&next_vals),
                },
            });
        }
    }
    Ok(out)
}

/// Dense global configuration. `active` marks CSAs that have contributed
/// to the trace; `calls` counts scenario calls already made.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Joint {
    states: Vec<u32>,
    vals: Vec<u32>,
    active: Vec<bool>,
    priority: u32,
    pending: Option<u32>,
    calls: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Factor {
    One,
    Delivered,
    Dropped,
}

struct Succ {
    rule: GlobalRule,
    factor: Factor,
    /// the local move taken, as (csa, state, move index)
    step: Option<(u32, u32, u32)>,
    next: Joint,
}

struct Network {
    csas: Vec<Compiled>,
    offsets: Vec<usize>,
    messages: Messages,
    by_owner: HashMap<CarId, u32>,
    delta: f64,
}

impl Network {
    fn new(csas: &[Csa], delta: f64) -> Result<Self, SemanticsError> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(SemanticsError::DeltaOutOfRange(delta));
        }
        let mut messages = Messages {
            list: Vec::new(),
            index: HashMap::new(),
        };
        let mut compiled = Vec::with_capacity(csas.len());
        let mut by_owner = HashMap::new();
        let mut offsets = Vec::with_capacity(csas.len());
        let mut offset = 0;
        for (i, csa) in csas.iter().enumerate() {
            if by_owner.insert(csa.owner.clone(), i as u32).is_some() {
                return Err(SemanticsError::DuplicateOwner(csa.owner.clone()));
            }
            let c = Compiled::new(csa, &mut messages)?;
            offsets.push(offset);
            offset += c.vars.len();
            compiled.push(c);
        }
        offsets.push(offset);
        Ok(Network {
            csas: compiled,
            offsets,
            messages,
            by_owner,
            delta,
        })
    }

    fn factor(&self, f: Factor) -> f64 {
        match f {
            Factor::One => 1.0,
            Factor::Delivered => 1.0 - self.delta,
            Factor::Dropped => self.delta,
        }
    }

    fn vals<'a>(&self, j: &'a Joint, x: usize) -> &'a [u32] {
        &j.vals[self.offsets[x]..self.offsets[x + 1]]
    }

    fn initial(&self, scenario: &Scenario) -> Joint {
        let priority = scenario
            .calls
            .first()
            .and_then(|e| self.by_owner.get(&e.src).copied())
            .unwrap_or(0);
        Joint {
            states: self.csas.iter().map(|c| c.init).collect(),
            vals: vec![0; *self.offsets.last().unwrap_or(&0)],
            active: vec![false; self.csas.len()],
            priority,
            pending: None,
            calls: 0,
        }
    }

    fn globally_final(&self, j: &Joint) -> bool {
        self.csas
            .iter()
            .enumerate()
            .all(|(x, c)| !j.active[x] || c.finals[j.states[x] as usize])
    }

    fn apply(&self, j: &Joint, x: usize, mi: usize, priority: u32) -> Joint {
        let m = &self.csas[x].moves[j.states[x] as usize][mi];
        let mut next = j.clone();
        let off = self.offsets[x];
        next.states[x] = apply_local(m, &mut next.vals[off..self.offsets[x + 1]]);
        next.active[x] = true;
        next.priority = priority;
        next.pending = match m.op {
            Op::Broadcast { msg, .. } => Some(msg),
            _ => None,
        };
        if matches!(m.op, Op::Env(_)) {
            next.calls += 1;
        }
        next
    }

    /// Indices of the moves of CSA `x` in class `class` that may fire now.
    fn moves_of(&self, j: &Joint, x: usize, class: Class, scenario: &Scenario) -> Vec<usize> {
        let c = &self.csas[x];
        let vals = self.vals(j, x);
        c.moves[j.states[x] as usize]
            .iter()
            .enumerate()
            .filter(|(_, m)| m.class() == class && m.enabled(vals))
            .filter(|(_, m)| match &m.op {
                Op::Env(event) => scenario
                    .calls
                    .get(j.calls as usize)
                    .is_some_and(|g| env_matches(g, &c.owner, event)),
                _ => true,
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn successors(&self, j: &Joint, scenario: &Scenario) -> Vec<Succ> {
        let mut out = Vec::new();
        if let Some(msg) = j.pending {
            let message = &self.messages.list[msg as usize];
            let Some(&z) = self.by_owner.get(&message.dst) else {
                let mut next = j.clone();
                next.pending = None;
                out.push(Succ {
                    rule: GlobalRule::Nacc,
                    factor: Factor::One,
                    step: None,
                    next,
                });
                return out;
            };
            let receptions = self.moves_of(j, z as usize, Class::R(msg), scenario);
            for &mi in &receptions {
                out.push(Succ {
                    rule: GlobalRule::Trans,
                    factor: Factor::Delivered,
                    step: Some((z, j.states[z as usize], mi as u32)),
                    next: self.apply(j, z as usize, mi, z),
                });
            }
            let mut next = j.clone();
            next.pending = None;
            next.priority = z;
            out.push(Succ {
                rule: if receptions.is_empty() {
                    GlobalRule::Nacc
                } else {
                    GlobalRule::Drop
                },
                factor: if receptions.is_empty() {
                    Factor::One
                } else {
                    Factor::Dropped
                },
                step: None,
                next,
            });
            return out;
        }
        let y = j.priority as usize;
        let local = |x: usize, class: Class, rule: GlobalRule, out: &mut Vec<Succ>| {
            for mi in self.moves_of(j, x, class, scenario) {
                out.push(Succ {
                    rule,
                    factor: Factor::One,
                    step: Some((x as u32, j.states[x], mi as u32)),
                    next: self.apply(j, x, mi, x as u32),
                });
            }
        };
        local(y, Class::E, GlobalRule::PrE, &mut out);
        if out.is_empty() {
            local(y, Class::T, GlobalRule::PrT, &mut out);
        }
        if out.is_empty() {
            for x in 0..self.csas.len() {
                local(x, Class::E, GlobalRule::Npr, &mut out);
                local(x, Class::T, GlobalRule::Npr, &mut out);
            }
        }
        out
    }

    fn emitted(&self, step: Option<(u32, u32, u32)>) -> &[TraceItem] {
        match step {
            Some((x, s, mi)) => &self.csas[x as usize].moves[s as usize][mi as usize].emit,
            None => &[],
        }
    }

    fn track(&self, t: Track, step: Option<(u32, u32, u32)>, sigma: &[GlobalEvent]) -> Track {
        self.emitted(step).iter().fold(t, |t, item| t.advance(item, sigma))
    }

    fn to_joint(&self, cfg: &GlobalConfig) -> Result<Joint, SemanticsError> {
        let mut states = Vec::with_capacity(self.csas.len());
        let mut vals = Vec::new();
        let mut active = Vec::with_capacity(self.csas.len());
        for (c, local) in self.csas.iter().zip(&cfg.locals) {
            let s = c.state_index(local.state)?;
            states.push(s);
            vals.extend(c.dense_valuation(&local.valuation));
            active.push(s != c.init || cfg.rho.iter().any(|item| *item.car() == c.owner));
        }
        let priority = *self
            .by_owner
            .get(&cfg.priority)
            .ok_or_else(|| SemanticsError::UnknownCar(cfg.priority.clone()))?;
        let pending = match cfg.rho.last() {
            Some(TraceItem::Broadcast { msg }) => self.messages.index.get(msg).copied(),
            _ => None,
        };
        let calls = cfg.rho.iter().filter(|i| matches!(i, TraceItem::Env { .. })).count() as u32;
        Ok(Joint {
            states,
            vals,
            active,
            priority,
            pending,
            calls,
        })
    }

    fn to_config(&self, j: &Joint, rho: Vec<TraceItem>, prob: f64) -> GlobalConfig {
        GlobalConfig {
            rho,
            locals: self
                .csas
                .iter()
                .enumerate()
                .map(|(x, c)| LocalConfig {
                    state: c.ids[j.states[x] as usize],
                    valuation: c.valuation(self.vals(j, x)),
                })
                .collect(),
            priority: self.csas[j.priority as usize].owner.clone(),
            prob,
        }
    }
}

fn extend_rho(rho: &mut Vec<TraceItem>, rule: GlobalRule, emitted: &[TraceItem]) {
    if matches!(rule, GlobalRule::Trans | GlobalRule::Drop | GlobalRule::Nacc) {
        rho.pop();
    }
    rho.extend(emitted.iter().cloned());
}

/// All global successors of `cfg` with nonzero probability.
pub fn global_steps(
    csas: &[Csa],
    delta: f64,
    cfg: &GlobalConfig,
    scenario: &Scenario,
) -> Result<Vec<(GlobalRule, GlobalConfig)>, SemanticsError> {
    let net = Network::new(csas, delta)?;
    if cfg.locals.len() != csas.len() {
        return Err(SemanticsError::UnknownCar(cfg.priority.clone()));
    }
    let joint = net.to_joint(cfg)?;
    let mut out = Vec::new();
    for succ in net.successors(&joint, scenario) {
        let prob = cfg.prob * net.factor(succ.factor);
        if prob == 0.0 {
            continue;
        }
        let mut rho = cfg.rho.clone();
        extend_rho(&mut rho, succ.rule, net.emitted(succ.step));
        out.push((succ.rule, net.to_config(&succ.next, rho, prob)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExploreOptions {
    pub budget: usize,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions { budget: DEFAULT_BUDGET }
    }
}

type Key = (Joint, Track);

struct Frame {
    key: Key,
    succs: Vec<(f64, Key)>,
    next: usize,
    acc: f64,
}

enum Opened {
    Value(f64),
    Frame(Frame),
}

struct Explorer<'a> {
    net: &'a Network,
    scenario: &'a Scenario,
    memo: HashMap<Key, f64>,
    on_stack: HashSet<Key>,
    budget: usize,
}

impl Explorer<'_> {
    fn open(&self, key: Key) -> Opened {
        let sigma = &self.scenario.calls;
        let (joint, track) = &key;
        if *track == Track::Dead {
            return Opened::Value(0.0);
        }
        if track.complete(sigma) && self.net.globally_final(joint) {
            return Opened::Value(1.0);
        }
        let succs: Vec<(f64, Key)> = self
            .net
            .successors(joint, self.scenario)
            .into_iter()
            .filter_map(|s| {
                let f = self.net.factor(s.factor);
                let t = self.net.track(*track, s.step, sigma);
                (f > 0.0 && t != Track::Dead).then_some((f, (s.next, t)))
            })
            .collect();
        if succs.is_empty() {
            return Opened::Value(0.0);
        }
        Opened::Frame(Frame {
            key,
            succs,
            next: 0,
            acc: 0.0,
        })
    }

    fn diverged(&self, reason: DivergenceReason) -> SemanticsError {
        SemanticsError::DivergenceDetected {
            explored: self.memo.len() + self.on_stack.len(),
            reason,
        }
    }

    /// Probability of reaching an absorbing configuration from `root`.
    fn value(&mut self, root: Key) -> Result<f64, SemanticsError> {
        let mut stack = match self.open(root) {
            Opened::Value(v) => return Ok(v),
            Opened::Frame(f) => {
                self.on_stack.insert(f.key.clone());
                vec![f]
            }
        };
        loop {
            let top = stack.last_mut().expect("stack is nonempty inside the loop");
            if top.next == top.succs.len() {
                let done = stack.pop().expect("nonempty");
                self.on_stack.remove(&done.key);
                let value = done.acc;
                self.memo.insert(done.key, value);
                match stack.last_mut() {
                    None => return Ok(value),
                    Some(parent) => {
                        parent.acc += parent.succs[parent.next].0 * value;
                        parent.next += 1;
                    }
                }
                continue;
            }
            let (factor, child) = top.succs[top.next].clone();
            if let Some(&v) = self.memo.get(&child) {
                top.acc += factor * v;
                top.next += 1;
                continue;
            }
            if self.on_stack.contains(&child) {
                return Err(self.diverged(DivergenceReason::Cycle));
            }
            if self.memo.len() + self.on_stack.len() >= self.budget {
                return Err(self.diverged(DivergenceReason::Budget));
            }
            match self.open(child) {
                Opened::Value(v) => {
                    top.acc += factor * v;
                    top.next += 1;
                }
                Opened::Frame(f) => {
                    self.on_stack.insert(f.key.clone());
                    stack.push(f);
                }
            }
        }
    }
}

/// `r(σ, δ, 𝓜)`: the total probability of the deductions that make the
/// calls of `σ`, end in a globally final configuration and project to `σ`.
/// Alternative deductions from one configuration are summed.
pub fn compute_sync_prob(
    csas: &[Csa],
    delta: f64,
    sigma: &[GlobalEvent],
    options: ExploreOptions,
) -> Result<f64, SemanticsError> {
    let net = Network::new(csas, delta)?;
    let scenario = Scenario::for_sequence(sigma);
    let mut explorer = Explorer {
        net: &net,
        scenario: &scenario,
        memo: HashMap::new(),
        on_stack: HashSet::new(),
        budget: options.budget,
    };
    explorer.value((net.initial(&scenario), Track::START))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceVerdict {
    pub sequence: String,
    pub required: f64,
    pub achieved: f64,
    pub margin: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectnessReport {
    pub holds: bool,
    pub sequences: Vec<SequenceVerdict>,
}

/// Checks that every p-sequence of `spec` is synchronized with at least its
/// probability, up to [`PROBABILITY_TOLERANCE`].
pub fn check_correctness(
    csas: &[Csa],
    delta: f64,
    spec: &ProtocolSpec,
    options: ExploreOptions,
) -> Result<CorrectnessReport, SemanticsError> {
    let mut sequences = Vec::new();
    for PSequence { events, p } in spec.sequences() {
        let achieved = compute_sync_prob(csas, delta, &events, options)?;
        let holds = spec.is_satisfied_by(&events, (achieved + PROBABILITY_TOLERANCE).min(1.0));
        sequences.push(SequenceVerdict {
            sequence: PSequence { events, p }.to_string(),
            required: p,
            achieved,
            margin: achieved - p,
            holds,
        });
    }
    Ok(CorrectnessReport {
        holds: sequences.iter().all(|s| s.holds),
        sequences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonteCarloConfig {
    pub runs: u64,
    pub seed: u64,
    pub record_traces: bool,
    /// Runs still going after this many global steps count as failures.
    pub max_steps: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            runs: 10_000,
            seed: 0,
            record_traces: false,
            max_steps: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Failure,
}

/// One line of the trace log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunTrace {
    pub run: u64,
    pub outcome: RunOutcome,
    pub rho: Vec<String>,
    pub final_states: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloReport {
    pub successes: u64,
    pub failures: u64,
    pub rate: f64,
    /// Standard error of `rate` under a binomial model.
    pub std_error: f64,
    pub traces: Vec<RunTrace>,
}

impl MonteCarloReport {
    pub fn write_traces(&self, mut out: impl Write) -> std::io::Result<()> {
        for trace in &self.traces {
            serde_json::to_writer(&mut out, trace)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Samples `config.runs` independent paths through the global semantics:
/// each pending broadcast is dropped with probability `delta`, other choices
/// are uniform. Run `i` draws from its own stream of a ChaCha generator
/// seeded with `config.seed`, so results do not depend on thread count.
pub fn run_monte_carlo(
    csas: &[Csa],
    delta: f64,
    scenario: &Scenario,
    config: MonteCarloConfig,
) -> Result<MonteCarloReport, SemanticsError> {
    let net = Network::new(csas, delta)?;
    let results: Vec<(bool, Option<RunTrace>)> = (0..config.runs)
        .into_par_iter()
        .map(|run| sample_run(&net, scenario, config, run))
        .collect();
    let successes = results.iter().filter(|(ok, _)| *ok).count() as u64;
    let runs = config.runs.max(1) as f64;
    let rate = successes as f64 / runs;
    Ok(MonteCarloReport {
        successes,
        failures: config.runs - successes,
        rate,
        std_error: (rate * (1.0 - rate) / runs).sqrt(),
        traces: results.into_iter().filter_map(|(_, t)| t).collect(),
    })
}

fn sample_run(net: &Network, scenario: &Scenario, config: MonteCarloConfig, run: u64) -> (bool, Option<RunTrace>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(run);
    let sigma = &scenario.calls;
    let mut joint = net.initial(scenario);
    let mut track = Track::START;
    let mut rho = Vec::new();
    let mut success = false;
    for _ in 0..config.max_steps {
        if track == Track::Dead {
            break;
        }
        if track.complete(sigma) && net.globally_final(&joint) {
            success = true;
            break;
        }
        let succs = net.successors(&joint, scenario);
        if succs.is_empty() {
            break;
        }
        let chosen = if joint.pending.is_some() {
            let delivered: Vec<&Succ> = succs.iter().filter(|s| s.rule == GlobalRule::Trans).collect();
            if delivered.is_empty() || rng.random::<f64>() < net.delta {
                succs
                    .iter()
                    .find(|s| s.rule != GlobalRule::Trans)
                    .expect("drop or nacc is always offered")
            } else {
                delivered[rng.random_range(0..delivered.len())]
            }
        } else {
            &succs[rng.random_range(0..succs.len())]
        };
        track = net.track(track, chosen.step, sigma);
        if config.record_traces {
            extend_rho(&mut rho, chosen.rule, net.emitted(chosen.step));
        }
        joint = chosen.next.clone();
    }
    let trace = config.record_traces.then(|| RunTrace {
        run,
        outcome: if success {
            RunOutcome::Success
        } else {
            RunOutcome::Failure
        },
        rho: rho.iter().map(ToString::to_string).collect(),
        final_states: net
            .csas
            .iter()
            .enumerate()
            .map(|(x, c)| (c.owner.to_string(), c.ids[joint.states[x] as usize].to_string()))
            .collect(),
    });
    (success, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{sync_prob, BoundsVector};
    use crate::protocol::tests::example;
    use crate::synthesis::synthesize_for_car;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn example_csas(snd: u32, ack: u32, nack: u32) -> Vec<Csa> {
        let bounds = BoundsVector(
            [("snd", snd), ("ack", ack), ("nack", nack)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        );
        ["A", "B"]
            .iter()
            .map(|c| synthesize_for_car(&example(0.7, 0.8), &CarId::from(*c), &bounds).unwrap())
            .collect()
    }

    fn snd() -> GlobalEvent {
        GlobalEvent::new("snd", "A", "B").with_data("d")
    }

    fn ack() -> GlobalEvent {
        GlobalEvent::new("ack", "B", "A")
    }

    fn nack() -> GlobalEvent {
        GlobalEvent::new("nack", "B", "A")
    }

    #[test]
    fn only_the_call_is_enabled_initially() {
        let csas = example_csas(3, 1, 2);
        let steps = local_steps(&csas[0], &LocalConfig::initial(&csas[0]), None).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, LocalRule::Env);
        assert_eq!(steps[0].next.state, StateId(1));
        // nothing happens at B without a reception
        let b = local_steps(&csas[1], &LocalConfig::initial(&csas[1]), None).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn broadcast_or_fail_depends_on_counter() {
        let csas = example_csas(3, 1, 2);
        let a = &csas[0];
        let mut cfg = LocalConfig {
            state: StateId(1),
            valuation: LocalConfig::initial(a).valuation,
        };
        let steps = local_steps(a, &cfg, None).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, LocalRule::BC);
        cfg.valuation.insert(CounterVar("snd".into()), 4);
        let steps = local_steps(a, &cfg, None).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, LocalRule::SysC);
        assert!(matches!(&steps[0].emitted[0], TraceItem::Sys { event, .. } if event.to_string() == "fail_snd"));
    }

    #[test]
    fn reception_needs_input() {
        let csas = example_csas(3, 1, 2);
        let b = &csas[1];
        let msg = Message {
            id: "snd".into(),
            src: "A".into(),
            dst: "B".into(),
            data: Some("d".into()),
        };
        let steps = local_steps(b, &LocalConfig::initial(b), Some(&msg)).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, LocalRule::RSys);
        assert_eq!(steps[0].emitted.len(), 2);
        let other = Message {
            id: "ack".into(),
            ..msg
        };
        assert!(local_steps(b, &LocalConfig::initial(b), Some(&other))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn walkthrough_of_first_exchange() {
        let csas = example_csas(3, 1, 2);
        let scenario = Scenario::for_sequence(&[snd(), ack()]);
        let cfg = GlobalConfig::initial(&csas, &scenario);
        assert_eq!(cfg.priority, CarId::from("A"));
        let steps = global_steps(&csas, 0.35, &cfg, &scenario).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].0, GlobalRule::PrE);
        let steps = global_steps(&csas, 0.35, &steps[0].1, &scenario).unwrap();
        assert_eq!(steps.len(), 1);
        let broadcast = &steps[0].1;
        assert!(matches!(broadcast.rho.last(), Some(TraceItem::Broadcast { .. })));
        let split = global_steps(&csas, 0.35, broadcast, &scenario).unwrap();
        let rules: Vec<GlobalRule> = split.iter().map(|(r, _)| *r).collect();
        assert_eq!(rules, [GlobalRule::Trans, GlobalRule::Drop]);
        assert_abs_diff_eq!(split[0].1.prob, 0.65, epsilon = 1e-15);
        assert_abs_diff_eq!(split[1].1.prob, 0.35, epsilon = 1e-15);
        // the broadcast leaves ρ in both branches
        assert!(!split[1].1.rho.iter().any(|i| matches!(i, TraceItem::Broadcast { .. })));
        // after the drop B holds priority but is stuck, so A times out
        let dropped = &split[1].1;
        assert_eq!(dropped.priority, CarId::from("B"));
        let next = global_steps(&csas, 0.35, dropped, &scenario).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].0, GlobalRule::Npr);
        assert_eq!(next[0].1.priority, CarId::from("A"));
        assert_eq!(next[0].1.locals[0].valuation[&CounterVar("snd".into())], 1);
    }

    #[test]
    fn zero_delta_prunes_drops() {
        let csas = example_csas(3, 1, 2);
        let scenario = Scenario::for_sequence(&[snd(), ack()]);
        let mut cfg = GlobalConfig::initial(&csas, &scenario);
        for _ in 0..2 {
            cfg = global_steps(&csas, 0.0, &cfg, &scenario).unwrap().remove(0).1;
        }
        let split = global_steps(&csas, 0.0, &cfg, &scenario).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split[0].0, GlobalRule::Trans);
    }

    #[test]
    fn exact_probability_reference_value() {
        let csas = example_csas(3, 1, 2);
        let r = compute_sync_prob(&csas, 0.35, &[snd(), ack()], ExploreOptions::default()).unwrap();
        assert_abs_diff_eq!(r, 0.781780796875, epsilon = 1e-9);
    }

    #[test]
    fn extremes_of_delta() {
        let csas = example_csas(3, 1, 2);
        for sigma in [[snd(), ack()], [snd(), nack()]] {
            assert_abs_diff_eq!(
                compute_sync_prob(&csas, 0.0, &sigma, ExploreOptions::default()).unwrap(),
                1.0
            );
            assert_abs_diff_eq!(
                compute_sync_prob(&csas, 1.0, &sigma, ExploreOptions::default()).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn sequences_outside_the_protocol_are_never_generated() {
        let csas = example_csas(3, 1, 2);
        let r = compute_sync_prob(&csas, 0.2, &[snd()], ExploreOptions::default()).unwrap();
        assert_eq!(r, 0.0);
        let r = compute_sync_prob(&csas, 0.2, &[ack(), snd()], ExploreOptions::default()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn exact_matches_closed_form_on_delta_grid() {
        let csas = example_csas(3, 1, 2);
        for step in 1..=10 {
            let delta = step as f64 * 0.05;
            let r = compute_sync_prob(&csas, delta, &[snd(), nack()], ExploreOptions::default()).unwrap();
            assert_abs_diff_eq!(r, sync_prob(&[3, 2], delta).unwrap(), epsilon = 1e-9);
        }
    }

    #[test]
    fn correctness_at_and_beyond_design_point() {
        let csas = example_csas(3, 1, 2);
        let spec = example(0.7, 0.8);
        let report = check_correctness(&csas, 0.35, &spec, ExploreOptions::default()).unwrap();
        assert!(report.holds);
        assert!(report.sequences.iter().all(|s| s.margin >= 0.0));
        let report = check_correctness(&csas, 0.6, &spec, ExploreOptions::default()).unwrap();
        assert!(!report.holds);
        let zero = example_csas(0, 0, 0);
        assert!(
            check_correctness(&zero, 0.0, &spec, ExploreOptions::default())
                .unwrap()
                .holds
        );
    }

    #[test]
    fn budget_is_enforced() {
        let csas = example_csas(3, 1, 2);
        let err = compute_sync_prob(&csas, 0.35, &[snd(), ack()], ExploreOptions { budget: 3 }).unwrap_err();
        assert!(matches!(
            err,
            SemanticsError::DivergenceDetected {
                reason: DivergenceReason::Budget,
                ..
            }
        ));
    }

    #[test]
    fn cycles_are_detected() {
        // A re-sends forever without counting and nobody listens
        let mut a = Csa::new(CarId::from("A"), StateId(0));
        a.add_state(StateId(1));
        a.add_final(StateId(2));
        a.add_transition(
            StateId(0),
            TransitionLabel::Env {
                event: LocalEvent::env("e", "B", None),
            },
            StateId(1),
        );
        a.vars.insert(CounterVar("e".into()));
        let msg = Message {
            id: "e".into(),
            src: "A".into(),
            dst: "B".into(),
            data: None,
        };
        let cond = crate::csa::Condition::le(CounterVar("e".into()), 5);
        a.add_transition(StateId(1), TransitionLabel::BroadcastCond { msg, cond }, StateId(1));
        let b = Csa::new(CarId::from("B"), StateId(0));
        let err = compute_sync_prob(
            &[a, b],
            0.5,
            &[GlobalEvent::new("e", "A", "B")],
            ExploreOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SemanticsError::DivergenceDetected {
                reason: DivergenceReason::Cycle,
                ..
            }
        ));
    }

    #[test]
    fn probability_is_conserved_at_every_split() {
        let csas = example_csas(2, 1, 1);
        let scenario = Scenario::for_sequence(&[snd(), ack()]);
        let mut frontier = vec![GlobalConfig::initial(&csas, &scenario)];
        let mut absorbed = 0.0;
        for _ in 0..200 {
            let mut next = Vec::new();
            for cfg in &frontier {
                let succs = global_steps(&csas, 0.35, cfg, &scenario).unwrap();
                if succs.is_empty() {
                    absorbed += cfg.prob;
                    continue;
                }
                let total: f64 = succs.iter().map(|(_, c)| c.prob).sum();
                assert_abs_diff_eq!(total, cfg.prob, epsilon = 1e-12);
                next.extend(succs.into_iter().map(|(_, c)| c));
            }
            frontier = next;
        }
        let live: f64 = frontier.iter().map(|c| c.prob).sum();
        assert_abs_diff_eq!(absorbed + live, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_examples() {
        let a: CarId = "A".into();
        let b: CarId = "B".into();
        let msg = Message {
            id: "snd".into(),
            src: a.clone(),
            dst: b.clone(),
            data: Some("d".into()),
        };
        let call = TraceItem::Env {
            car: a.clone(),
            event: LocalEvent::env("snd", "B", Some("d".into())),
        };
        let rho = vec![
            call.clone(),
            TraceItem::Broadcast { msg: msg.clone() },
            TraceItem::Receive { msg },
            TraceItem::Sys {
                car: b.clone(),
                event: LocalEvent::sys("snd", "A", Some("d".into())),
            },
        ];
        assert_eq!(project(&rho), vec![Projected::Global(snd())]);
        assert_eq!(project(&[]), vec![]);
        let stray = vec![
            call,
            TraceItem::Timeout { car: a.clone() },
            TraceItem::Sys {
                car: a,
                event: LocalEvent::sys("ack", "B", None),
            },
        ];
        assert_eq!(project(&stray), vec![Projected::Unsynchronized(snd())]);
    }

    #[test]
    fn interleaved_upcall_blocks_fusion() {
        let rho = vec![
            TraceItem::Env {
                car: "A".into(),
                event: LocalEvent::env("snd", "B", Some("d".into())),
            },
            TraceItem::Sys {
                car: "A".into(),
                event: LocalEvent::fail("snd", "B"),
            },
            TraceItem::Sys {
                car: "B".into(),
                event: LocalEvent::sys("snd", "A", Some("d".into())),
            },
        ];
        assert_eq!(project(&rho), vec![Projected::Unsynchronized(snd())]);
    }

    #[test]
    fn monte_carlo_without_loss_always_succeeds() {
        let csas = example_csas(3, 1, 2);
        let report = run_monte_carlo(
            &csas,
            0.0,
            &Scenario::for_sequence(&[snd(), ack()]),
            MonteCarloConfig {
                runs: 100,
                ..MonteCarloConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.successes, 100);
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let csas = example_csas(3, 1, 2);
        let config = MonteCarloConfig {
            runs: 200,
            seed: 7,
            record_traces: true,
            ..MonteCarloConfig::default()
        };
        let scenario = Scenario::for_sequence(&[snd(), ack()]);
        let r1 = run_monte_carlo(&csas, 0.35, &scenario, config).unwrap();
        let r2 = run_monte_carlo(&csas, 0.35, &scenario, config).unwrap();
        assert_eq!(r1, r2);
        let mut log = Vec::new();
        r1.write_traces(&mut log).unwrap();
        let first: serde_json::Value = serde_json::from_slice(log.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["run"], 0);
        assert!(first["rho"].is_array());
        assert!(first["final_states"]["A"].is_string());
    }

    fn chain(len: usize) -> (ProtocolSpec, Vec<GlobalEvent>) {
        let events: Vec<GlobalEvent> = (0..len)
            .map(|k| {
                let (src, dst) = if k % 2 == 0 { ("A", "B") } else { ("B", "A") };
                GlobalEvent::new(format!("e{k}"), src, dst)
            })
            .collect();
        let mut spec = ProtocolSpec::leaf(events[len - 1].clone(), 0.5);
        for e in events[..len - 1].iter().rev() {
            spec = ProtocolSpec::seq(e.clone(), spec);
        }
        (spec, events)
    }

    fn chain_csas(spec: &ProtocolSpec, bounds: &[u32]) -> Vec<Csa> {
        let bv = BoundsVector((0..bounds.len()).map(|k| (format!("e{k}"), bounds[k])).collect());
        ["A", "B"]
            .iter()
            .map(|c| synthesize_for_car(spec, &CarId::from(*c), &bv).unwrap())
            .collect()
    }

    /// Every bound vector with components up to `max`.
    fn vectors(len: usize, max: u32) -> Vec<Vec<u32>> {
        (0..(max + 1).pow(len as u32))
            .map(|mut code| {
                (0..len)
                    .map(|_| {
                        let v = code % (max + 1);
                        code /= max + 1;
                        v
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn exact_matches_recursion_on_longer_chains() {
        for (len, max) in [(3, 3), (4, 2)] {
            let (spec, sigma) = chain(len);
            for bounds in vectors(len, max) {
                let csas = chain_csas(&spec, &bounds);
                for delta in [0.1, 0.25, 0.4] {
                    let r = compute_sync_prob(&csas, delta, &sigma, ExploreOptions::default()).unwrap();
                    let p = sync_prob(&bounds, delta).unwrap();
                    assert_abs_diff_eq!(r, p, epsilon = 1e-9);
                }
            }
        }
    }

    /// The recursion with the two-event formula as its base case, evaluated
    /// literally; it counts the final transmission of the last-but-one event
    /// twice and so disagrees with the semantics once a chain has three events.
    fn literal_recursion(bounds: &[u32], delta: f64) -> f64 {
        fn hat(b: &[u32], delta: f64) -> f64 {
            if b.len() == 2 {
                return sync_prob(b, delta).unwrap();
            }
            let rho = 1.0 - delta;
            let m = b[0].min(b[1]);
            (0..=m)
                .map(|i| {
                    let mut rest = b[1..].to_vec();
                    rest[0] = b[1] - i;
                    delta.powi(i as i32) * hat(&rest, delta)
                })
                .sum::<f64>()
                * rho
        }
        let rho = 1.0 - delta;
        (0..=bounds[0])
            .map(|i| {
                let mut rest = bounds.to_vec();
                rest[0] = bounds[0] - i;
                delta.powi(i as i32) * hat(&rest, delta)
            })
            .sum::<f64>()
            * rho
    }

    #[test]
    fn literal_recursion_overcounts_three_event_chains() {
        let (spec, sigma) = chain(3);
        let csas = chain_csas(&spec, &[2, 2, 2]);
        let r = compute_sync_prob(&csas, 0.3, &sigma, ExploreOptions::default()).unwrap();
        assert_abs_diff_eq!(r, 0.790648957, epsilon = 1e-9);
        assert_abs_diff_eq!(literal_recursion(&[2, 2, 2], 0.3), 0.7327297369, epsilon = 1e-9);
    }

    fn arb_item() -> impl Strategy<Value = TraceItem> {
        let names = prop::sample::select(vec!["a", "b"]);
        let cars = prop::sample::select(vec![("A", "B"), ("B", "A")]);
        prop_oneof![
            (names.clone(), cars.clone()).prop_map(|(n, (x, y))| TraceItem::Env {
                car: x.into(),
                event: LocalEvent::env(n, y, None),
            }),
            (names.clone(), cars.clone()).prop_map(|(n, (x, y))| TraceItem::Sys {
                car: x.into(),
                event: LocalEvent::sys(n, y, None),
            }),
            (names, cars.clone()).prop_map(|(n, (x, y))| TraceItem::Sys {
                car: x.into(),
                event: LocalEvent::fail(n, y),
            }),
            cars.prop_map(|(x, _)| TraceItem::Timeout { car: x.into() }),
        ]
    }

    fn arb_sigma() -> impl Strategy<Value = Vec<GlobalEvent>> {
        prop::collection::vec(
            (
                prop::sample::select(vec!["a", "b"]),
                prop::sample::select(vec![("A", "B"), ("B", "A")]),
            )
                .prop_map(|(n, (x, y))| GlobalEvent::new(n, x, y)),
            0..4,
        )
    }

    proptest! {
        #[test]
        fn tracker_agrees_with_projection(rho in prop::collection::vec(arb_item(), 0..10), sigma in arb_sigma()) {
            let tracked = rho.iter().fold(Track::START, |t, i| t.advance(i, &sigma)).complete(&sigma);
            let projected = project(&rho);
            let equal = projected.len() == sigma.len()
                && projected.iter().zip(&sigma).all(|(p, g)| *p == Projected::Global(g.clone()));
            prop_assert_eq!(tracked, equal);
        }

        #[test]
        fn global_events_never_span_another_upcall(rho in prop::collection::vec(arb_item(), 0..12)) {
            // a fused event's call is immediately followed, among upcalls,
            // by its own upcall
            let fused = project(&rho).iter().filter(|p| matches!(p, Projected::Global(_))).count();
            let mut adjacent = 0;
            let mut open: Option<&TraceItem> = None;
            for item in &rho {
                match item {
                    TraceItem::Env { .. } => open = Some(item),
                    TraceItem::Sys { car, event } => {
                        if let Some(TraceItem::Env { car: c, event: e }) = open {
                            let g = GlobalEvent { name: e.name.clone(), src: c.clone(), dst: e.peer.clone(), data: e.data.clone() };
                            if sys_matches(&g, car, event) {
                                adjacent += 1;
                            }
                        }
                        open = None;
                    }
                    _ => {}
                }
            }
            prop_assert_eq!(fused, adjacent);
        }
    }
}
