//! Bounded breadth-first exploration for secrecy attacks and the
//! authenticity invariant.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::rc::Rc;
use std::sync::Arc;
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

mod saturate;
pub use saturate::{saturate, Saturation, Suspect};

use crate::deduction::{derivation, AgentScope, DerivationStep, KnowledgeSet};
use crate::protocol::{revealed_vars, ProtocolTemplate};
use crate::semantics::{
    enabled_receives, enabled_sends, initial_state, session_sends, step, Bounds, Event, EventKind, Model, PartialSession, ReceiveGenerator,
    Scenario, SemanticsError, State, Trace,
};
use crate::term::{apply_valuation, ConcreteTerm, Fresh, Term, Value, Var};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("`{0}` is not a nonce or short-term key variable of the protocol")]
    UnknownVariable(String),
    #[error("unknown role `{0}`")]
    UnknownRole(String),
}

/// A secrecy goal: the value of `var` from the point of view of `viewpoint`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Target {
    pub var: Var,
    pub viewpoint: Var,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} from {}", self.var, self.viewpoint)
    }
}

/// Targets after splitting off those that cannot be searched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TargetPlan {
    pub searched: Vec<Target>,
    /// Revealed variables: broken by a passive observer, not searched.
    pub revealed: Vec<Target>,
    /// The viewpoint role never knows both the variable and every role, so
    /// secrecy cannot be claimed from it either way.
    pub not_evaluable: Vec<Target>,
}

/// Resolves the requested targets, defaulting to the protocol's `secret`
/// goals, or every unrevealed variable from every role when it has none.
pub fn plan_targets(model: &Model, requested: Option<&[Target]>) -> Result<TargetPlan, SearchError> {
    let p = &model.protocol;
    let (revealed, unrevealed) = revealed_vars(p);
    let wanted: Vec<Target> = match requested {
        Some(ts) => ts.to_vec(),
        None if !p.secrets.is_empty() => p
            .secrets
            .iter()
            .flat_map(|s| {
                let views: Vec<Var> = match &s.viewpoint {
                    Some(r) => vec![r.clone()],
                    None => p.roles.clone(),
                };
                views.into_iter().map(|viewpoint| Target {
                    var: s.var.clone(),
                    viewpoint,
                })
            })
            .collect(),
        None => unrevealed
            .iter()
            .flat_map(|x| {
                p.roles.iter().map(|r| Target {
                    var: x.clone(),
                    viewpoint: r.clone(),
                })
            })
            .collect(),
    };
    let mut plan = TargetPlan::default();
    for t in wanted {
        if !p.roles.contains(&t.viewpoint) {
            return Err(SearchError::UnknownRole(t.viewpoint.to_string()));
        }
        if revealed.contains(&t.var) {
            plan.revealed.push(t);
        } else if !unrevealed.contains(&t.var) {
            return Err(SearchError::UnknownVariable(t.var.to_string()));
        } else if evaluable(model, &t) {
            plan.searched.push(t);
        } else {
            plan.not_evaluable.push(t);
        }
    }
    Ok(plan)
}

fn evaluable(model: &Model, t: &Target) -> bool {
    let Some(rm) = model.role(&t.viewpoint) else { return false };
    rm.rows.iter().any(|row| {
        row.basic().contains(&Term::Atom(t.var.clone()))
            && model
                .protocol
                .roles
                .iter()
                .all(|r| row.basic().contains(&Term::Atom(r.clone())))
    })
}

/// Whether `session` witnesses a broken secret for `x`: its role knows `x`
/// and every role, no role is played by the intruder, and the intruder
/// knows the value of `x`.
pub fn secrecy_violated(model: &Model, state: &State, session: &PartialSession, x: &Var) -> bool {
    let Some(rm) = model.role(&session.role) else { return false };
    let row = &rm.rows[session.length];
    if !row.basic().contains(&Term::Atom(x.clone())) {
        return false;
    }
    for r in &model.protocol.roles {
        if !row.basic().contains(&Term::Atom(r.clone())) {
            return false;
        }
        match session.valuation.agent(r) {
            Some(a) if !a.is_intruder() => {}
            _ => return false,
        }
    }
    session
        .valuation
        .get_var(x)
        .is_some_and(|v| state.intruder.basic().contains(v))
}

fn violation<'s>(model: &Model, state: &'s State, targets: &[Target]) -> Option<(usize, &'s PartialSession)> {
    targets.iter().enumerate().find_map(|(i, t)| {
        let mut sessions: Vec<&PartialSession> =
            state.sessions.iter().filter(|s| s.role == t.viewpoint).collect();
        sessions.sort_by_key(|s| s.sid);
        sessions
            .into_iter()
            .find(|s| secrecy_violated(model, state, s, &t.var))
            .map(|s| (i, s))
    })
}

fn rename(t: &ConcreteTerm, map: &BTreeMap<Fresh, u32>) -> ConcreteTerm {
    t.map_atoms(&mut |a: &Value| match a {
        Value::Nonce(f) if !f.intruder => Value::Nonce(Fresh::honest(map.get(f).copied().unwrap_or(f.id))),
        Value::Key(f) if !f.intruder => Value::Key(Fresh::honest(map.get(f).copied().unwrap_or(f.id))),
        other => other.clone(),
    })
}

fn note_fresh(t: &ConcreteTerm, map: &mut BTreeMap<Fresh, u32>, next: &mut u32) {
    t.visit(&mut |s| {
        if let Term::Atom(a) = s {
            if let Some(f) = a.fresh().filter(|f| !f.intruder) {
                map.entry(f).or_insert_with(|| {
                    *next += 1;
                    *next - 1
                });
            }
        }
    });
}

/// A 64-bit hasher stretched to 128 bits by finishing twice with different
/// suffixes.
struct Digest(DefaultHasher);

impl Digest {
    fn new() -> Self {
        Digest(DefaultHasher::new())
    }

    fn put(&mut self, x: impl Hash) {
        x.hash(&mut self.0);
    }

    fn finish(&self) -> u128 {
        let mut second = self.0.clone();
        0xa5u8.hash(&mut second);
        (u128::from(self.0.finish()) << 64) | u128::from(second.finish())
    }
}

/// Hashes `t` with every honest fresh value replaced by `fresh(value)`.
fn digest_term(t: &ConcreteTerm, d: &mut Digest, fresh: &mut impl FnMut(Fresh) -> u32) {
    let mut atom = |a: &Value, d: &mut Digest| match a {
        Value::Nonce(f) if !f.intruder => d.put((1u8, fresh(*f))),
        Value::Key(f) if !f.intruder => d.put((2u8, fresh(*f))),
        other => d.put((0u8, other)),
    };
    match t {
        Term::Atom(a) => {
            d.put(0u8);
            atom(a, d);
        }
        Term::Pk(a) => {
            d.put(1u8);
            atom(a, d);
        }
        Term::Sk(a) => {
            d.put(2u8);
            atom(a, d);
        }
        Term::Shk(a, b) => {
            d.put(3u8);
            atom(a, d);
            atom(b, d);
        }
        Term::Tuple(items) => {
            d.put((4u8, items.len()));
            for x in items {
                digest_term(x, d, fresh);
            }
        }
        Term::Enc(body, key) => {
            d.put(5u8);
            digest_term(body, d, fresh);
            digest_term(key, d, fresh);
        }
    }
}

/// A 128-bit digest of the state up to session identities and renaming of
/// honest fresh values, used for visited-state deduplication.
pub fn canonical_key(state: &State) -> u128 {
    // A session's domain is fixed by its role and length, so its values in
    // domain order describe it.
    let header = |s: &PartialSession, d: &mut Digest| d.put((&s.role, &s.owner, s.length));
    let mut order: Vec<(u128, &PartialSession)> = state
        .sessions
        .iter()
        .map(|s| {
            let mut d = Digest::new();
            header(s, &mut d);
            for v in s.valuation.values() {
                digest_term(v, &mut d, &mut |_| 0);
            }
            (d.finish(), s)
        })
        .collect();
    order.sort_by_key(|(masked, _)| *masked);
    let mut names: Vec<Fresh> = Vec::new();
    let mut rename = |f: Fresh| match names.iter().position(|g| *g == f) {
        Some(i) => i as u32 + 1,
        None => {
            names.push(f);
            names.len() as u32
        }
    };
    let mut renamed: Vec<u128> = order
        .iter()
        .map(|(_, s)| {
            let mut d = Digest::new();
            header(s, &mut d);
            for v in s.valuation.values() {
                digest_term(v, &mut d, &mut rename);
            }
            d.finish()
        })
        .collect();
    renamed.sort_unstable();
    // Intruder knowledge is the closure of what the sessions have sent, so
    // the sessions determine it.
    let mut d = Digest::new();
    d.put(&renamed);
    d.finish()
}

/// Everything a bounded exploration needs.
pub struct Explorer<'a> {
    pub model: &'a Model,
    pub bounds: &'a Bounds,
    pub scenario: &'a Scenario,
    pub generator: &'a dyn ReceiveGenerator,
    pub initial: State,
    /// Fact budget of the over-approximation tried before searching.
    pub abstraction_limit: usize,
}

/// Default fact budget of the over-approximation.
pub const ABSTRACTION_LIMIT: usize = 50_000;

struct Frontier {
    /// For every node but the initial one: its parent and its position among
    /// the parent's successors.
    parents: Vec<(usize, usize)>,
    explored: usize,
    transitions: usize,
    /// Hit nodes, all at the smallest event count where any hit occurs.
    hits: Vec<usize>,
}

#[derive(Clone)]
struct Pending {
    node: usize,
    key: u128,
    state: State,
    /// Session of the step that led here, and the receives offered by the
    /// state it was taken from.
    via: Option<(u32, Rc<HashSet<u128>>)>,
}

fn event_digest(e: &Event) -> u128 {
    let mut d = Digest::new();
    d.put(e);
    d.finish()
}

/// Interning of intruder knowledge: many pending states know the same.
#[derive(Default)]
struct Shared {
    intruder: HashMap<u64, Vec<Arc<KnowledgeSet<Value>>>>,
    observed: HashMap<u64, Vec<Arc<BTreeSet<ConcreteTerm>>>>,
}

fn intern<T: Hash + Eq>(table: &mut HashMap<u64, Vec<Arc<T>>>, x: &mut Arc<T>) {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    let same = table.entry(h.finish()).or_default();
    match same.iter().find(|y| ***y == **x) {
        Some(y) => *x = y.clone(),
        None => same.push(x.clone()),
    }
}

impl Shared {
    fn share(&mut self, s: &mut State) {
        intern(&mut self.intruder, &mut s.intruder);
        intern(&mut self.observed, &mut s.observed);
    }
}

fn event_count(s: &State) -> usize {
    s.sessions.iter().map(|x| x.length).sum()
}

impl<'a> Explorer<'a> {
    pub fn new(
        model: &'a Model,
        bounds: &'a Bounds,
        scenario: &'a Scenario,
        generator: &'a dyn ReceiveGenerator,
        seed: u32,
    ) -> Result<Self, SearchError> {
        bounds.validate()?;
        Ok(Explorer {
            model,
            bounds,
            scenario,
            generator,
            initial: initial_state(model, bounds, seed),
            abstraction_limit: ABSTRACTION_LIMIT,
        })
    }

    /// Single events after partial-order reduction: when a started session
    /// can send, only that session's sends are explored. A send depends on
    /// nothing but its own session and only grows knowledge, so delaying it
    /// never enables anything and never undoes a broken secret.
    ///
    /// For the same reason sessions that start by sending are only started
    /// before the first receive: any run can be reordered that way.
    fn single(&self, s: &State) -> Vec<(Event, State)> {
        let mut sends = enabled_sends(self.model, s, self.bounds, self.scenario);
        if let Some(sid) = sends.first().map(|(e, _)| e.sid).filter(|sid| *sid < s.next_sid) {
            return sends.into_iter().filter(|(e, _)| e.sid == sid).collect();
        }
        let received = s.sessions.iter().any(|x| {
            let rm = self.model.role(&x.role).expect("protocol role");
            (0..x.length).any(|l| !rm.sends_at(l))
        });
        if received {
            sends.retain(|(e, _)| e.sid < s.next_sid);
        }
        let mut out = sends;
        out.extend(enabled_receives(self.model, s, self.bounds, self.scenario, self.generator));
        out
    }

    /// Macro transitions: one event followed by every send its session is
    /// then ready to make, within the event bound.
    fn successors(&self, s: &State) -> Vec<(Vec<Event>, State)> {
        let mut out = Vec::new();
        for (e, next) in self.single(s) {
            let sid = e.sid;
            let mut pending = vec![(vec![e], next)];
            while let Some((events, state)) = pending.pop() {
                let more: Vec<(Event, State)> = if event_count(&state) < self.bounds.max_events {
                    session_sends(self.model, &state, self.bounds, sid)
                } else {
                    Vec::new()
                };
                if more.is_empty() {
                    out.push((events, state));
                    continue;
                }
                for (x, st) in more.into_iter().rev() {
                    let mut ev = events.clone();
                    ev.push(x);
                    pending.push((ev, st));
                }
            }
        }
        out
    }

    /// Breadth-first search by event count up to the event bound. `on_edge`
    /// sees every transition (with the event count of its source and whether
    /// the target is new or newly reached by a shorter run) and flags new
    /// states as hits. The search stops once every hit with the smallest
    /// event count is known.
    ///
    /// Receives leave the intruder's knowledge alone, so a receive by an
    /// existing session commutes with any step of another session. After a
    /// step of session `j`, a receive by a session numbered below `j` that
    /// the parent state already offered is skipped: the run taking it first
    /// reaches the same states.
    fn run(&self, mut on_edge: impl FnMut(&State, &[Event], &State, usize, bool) -> bool) -> Frontier {
        let mut visited: HashMap<u128, usize> = HashMap::new();
        visited.insert(canonical_key(&self.initial), 0);
        let mut f = Frontier {
            parents: vec![(usize::MAX, usize::MAX)],
            explored: 1,
            transitions: 0,
            hits: Vec::new(),
        };
        let mut buckets: Vec<Vec<Pending>> = vec![Vec::new(); self.bounds.max_events + 1];
        buckets[0].push(Pending {
            node: 0,
            key: canonical_key(&self.initial),
            state: self.initial.clone(),
            via: None,
        });
        let mut hit_depth = usize::MAX;
        let mut shared = Shared::default();
        for depth in 0..=self.bounds.max_events {
            if depth >= hit_depth {
                break;
            }
            for Pending { node, key, state, via } in std::mem::take(&mut buckets[depth]) {
                if visited.get(&key).is_some_and(|d| *d < depth) {
                    continue;
                }
                let succ = self.successors(&state);
                let offered: Rc<HashSet<u128>> = Rc::new(
                    succ.iter()
                        .map(|(events, _)| &events[0])
                        .filter(|e| e.kind == EventKind::Receive && e.sid < state.next_sid)
                        .map(event_digest)
                        .collect(),
                );
                for (i, (events, s)) in succ.into_iter().enumerate() {
                    let first = &events[0];
                    let commutes = first.kind == EventKind::Receive
                        && first.sid < state.next_sid
                        && via
                            .as_ref()
                            .is_some_and(|(sid, before)| first.sid < *sid && before.contains(&event_digest(first)));
                    if commutes {
                        continue;
                    }
                    f.transitions += 1;
                    let d = depth + events.len();
                    let k = canonical_key(&s);
                    let new = match visited.get(&k) {
                        Some(old) if *old <= d => false,
                        old => {
                            if old.is_none() {
                                f.explored += 1;
                            }
                            visited.insert(k, d);
                            true
                        }
                    };
                    let hit = on_edge(&state, &events, &s, depth, new);
                    if !new {
                        continue;
                    }
                    let id = f.parents.len();
                    f.parents.push((node, i));
                    if hit {
                        if d < hit_depth {
                            hit_depth = d;
                            f.hits.clear();
                        }
                        if d == hit_depth {
                            f.hits.push(id);
                        }
                    } else if d < buckets.len() {
                        let mut s = s;
                        shared.share(&mut s);
                        buckets[d].push(Pending {
                            node: id,
                            key: k,
                            state: s,
                            via: Some((first.sid, offered.clone())),
                        });
                    }
                }
            }
        }
        f
    }

    fn path(&self, parents: &[(usize, usize)], node: usize) -> Vec<Event> {
        let mut chain = Vec::new();
        let mut n = node;
        while n != 0 {
            let (parent, i) = parents[n];
            chain.push(i);
            n = parent;
        }
        let mut state = self.initial.clone();
        let mut events = Vec::new();
        for i in chain.into_iter().rev() {
            let (e, s) = self.successors(&state).swap_remove(i);
            events.extend(e);
            state = s;
        }
        events
    }
}

/// One line of a rendered attack: a send paired with the receive that
/// consumed it, a send nobody received, or a message forged by the intruder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageLine {
    pub sender: Value,
    pub receiver: Value,
    pub index: usize,
    pub message: ConcreteTerm,
    /// Positions in the trace of the send and receive events.
    pub send: Option<usize>,
    pub receive: Option<usize>,
}

impl MessageLine {
    pub fn render(&self, number: usize) -> String {
        let from = match self.send {
            Some(_) => self.sender.to_string(),
            None => format!("I({})", self.sender),
        };
        let to = match self.receive {
            Some(_) => self.receiver.to_string(),
            None => format!("I({})", self.receiver),
        };
        format!("{number:02} - {from} -> {to} : {}", self.message)
    }
}

/// Groups the events of a trace into message lines.
pub fn message_lines(events: &[Event]) -> Vec<MessageLine> {
    let mut lines: Vec<(usize, MessageLine)> = Vec::new();
    let mut consumed = BTreeSet::new();
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            EventKind::Send => {
                let receive = events.iter().enumerate().skip(i + 1).find(|(j, r)| {
                    r.kind == EventKind::Receive
                        && !consumed.contains(j)
                        && r.index == e.index
                        && r.message == e.message
                        && r.sender == e.sender
                        && r.receiver == e.receiver
                });
                let receive = receive.map(|(j, _)| j);
                if let Some(j) = receive {
                    consumed.insert(j);
                }
                lines.push((
                    i,
                    MessageLine {
                        sender: e.sender.clone(),
                        receiver: e.receiver.clone(),
                        index: e.index,
                        message: e.message.clone(),
                        send: Some(i),
                        receive,
                    },
                ));
            }
            EventKind::Receive if !consumed.contains(&i) => lines.push((
                i,
                MessageLine {
                    sender: e.sender.clone(),
                    receiver: e.receiver.clone(),
                    index: e.index,
                    message: e.message.clone(),
                    send: None,
                    receive: Some(i),
                },
            )),
            EventKind::Receive => {}
        }
    }
    lines.sort_by_key(|(i, _)| *i);
    lines.into_iter().map(|(_, l)| l).collect()
}

/// Renumbers sessions and honest fresh values in order of first
/// appearance; fresh values start at `seed`.
fn renumber(events: &[Event], seed: u32) -> Vec<Event> {
    let mut sids = BTreeMap::new();
    let mut fresh = BTreeMap::new();
    let mut next = seed;
    for e in events {
        let n = sids.len() as u32;
        sids.entry(e.sid).or_insert(n);
        note_fresh(&e.message, &mut fresh, &mut next);
        for v in e.valuation.values() {
            note_fresh(v, &mut fresh, &mut next);
        }
    }
    events
        .iter()
        .map(|e| Event {
            sid: sids[&e.sid],
            message: rename(&e.message, &fresh),
            valuation: e.valuation.map_values(|v| rename(v, &fresh)),
            ..e.clone()
        })
        .collect()
}

/// Reorders a trace so that sends happen as early as possible and every
/// receive directly follows the send it consumes when one exists, then
/// renumbers. Every prefix is re-validated; the original order is kept if
/// no valid reordering is found.
pub fn normalize(model: &Model, initial: &State, events: &[Event], seed: u32) -> Result<Trace, SemanticsError> {
    let reordered = reorder(model, initial, events).unwrap_or_else(|| events.to_vec());
    Trace::replay(model, initial.clone(), &renumber(&reordered, seed))
}

fn same_message(s: &Event, r: &Event) -> bool {
    s.index == r.index && s.message == r.message && s.sender == r.sender && s.receiver == r.receiver
}

fn reorder(model: &Model, initial: &State, events: &[Event]) -> Option<Vec<Event>> {
    let mut placed: Vec<Event> = Vec::with_capacity(events.len());
    let mut done = vec![false; events.len()];
    let mut sids: BTreeMap<u32, u32> = BTreeMap::new();
    let mut state = initial.clone();
    let mut unmatched_sends: Vec<usize> = Vec::new();
    while placed.len() < events.len() {
        // events whose session predecessors are all placed
        let ready: Vec<usize> = (0..events.len())
            .filter(|&i| !done[i])
            .filter(|&i| (0..i).all(|j| done[j] || events[j].sid != events[i].sid))
            .collect();
        let rank = |i: usize| {
            let e = &events[i];
            if e.kind == EventKind::Send {
                0
            } else if unmatched_sends.iter().any(|&s| same_message(&events[s], e)) {
                1
            } else if !events.iter().enumerate().any(|(j, s)| {
                !done[j] && s.kind == EventKind::Send && same_message(s, e)
            }) {
                2
            } else {
                3
            }
        };
        let mut order = ready;
        order.sort_by_key(|&i| (rank(i), i));
        let mut progressed = false;
        for i in order {
            let mut e = events[i].clone();
            let next_sid = sids.len() as u32;
            e.sid = *sids.get(&e.sid).unwrap_or(&state.next_sid.max(next_sid));
            if let Ok(next) = step(model, &state, &e) {
                sids.entry(events[i].sid).or_insert(e.sid);
                if e.kind == EventKind::Send {
                    unmatched_sends.push(i);
                } else if let Some(k) = unmatched_sends.iter().position(|&s| same_message(&events[s], &e)) {
                    unmatched_sends.remove(k);
                }
                done[i] = true;
                placed.push(e);
                state = next;
                progressed = true;
                break;
            }
        }
        if !progressed {
            return None;
        }
    }
    Some(placed)
}

#[derive(Clone, Debug)]
pub struct AttackReport {
    pub target: Target,
    pub trace: Trace,
    /// The session witnessing the broken secret in the final state.
    pub session: PartialSession,
    pub value: ConcreteTerm,
    /// How the intruder extracts the value from what it has seen.
    pub derivation: Vec<DerivationStep<Value>>,
    pub lines: Vec<MessageLine>,
}

impl AttackReport {
    pub fn events(&self) -> Vec<&Event> {
        self.trace.events().collect()
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub plan: TargetPlan,
    pub attack: Option<AttackReport>,
    pub explored: usize,
    pub transitions: usize,
    /// Set when the abstraction alone settled the question.
    pub proof: Option<AbstractProof>,
}

/// Size of the over-approximation that ruled out any violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct AbstractProof {
    pub facts: usize,
    pub sends: usize,
    pub rounds: usize,
}

impl AbstractProof {
    fn of(s: &Saturation) -> Self {
        AbstractProof {
            facts: s.facts,
            sends: s.sends.len(),
            rounds: s.rounds,
        }
    }
}

/// Everything the intruder has observed along a trace, including its
/// initial knowledge.
fn intruder_inputs(model: &Model, bounds: &Bounds, trace: &Trace) -> Vec<ConcreteTerm> {
    let mut out: Vec<ConcreteTerm> = model.protocol.intruder_initial.clone();
    for i in 1..=bounds.intruder_fresh {
        out.push(Term::Atom(Value::Nonce(Fresh::intruder(i))));
        out.push(Term::Atom(Value::Key(Fresh::intruder(i))));
    }
    out.extend(
        trace
            .events()
            .filter(|e| e.kind == EventKind::Send)
            .map(|e| e.message.clone()),
    );
    out
}

/// Looks for a state breaking one of the targets. The over-approximation
/// runs first; only when it finds a suspect does the concrete search run.
pub fn find_secrecy_attack(
    explorer: &Explorer<'_>,
    targets: Option<&[Target]>,
    seed: u32,
) -> Result<SearchOutcome, SearchError> {
    let plan = plan_targets(explorer.model, targets)?;
    if !plan.searched.is_empty() {
        let sat = saturate(
            explorer.model,
            explorer.bounds,
            explorer.scenario,
            explorer.generator,
            &plan.searched,
            explorer.abstraction_limit,
        );
        if sat.complete && sat.suspects.is_empty() {
            return Ok(SearchOutcome {
                plan,
                attack: None,
                explored: 0,
                transitions: 0,
                proof: Some(AbstractProof::of(&sat)),
            });
        }
    }
    concrete_search(explorer, plan, seed)
}

/// Breadth-first search for a state breaking one of the targets, without
/// the abstraction; the violation reported is among the shallowest.
pub fn find_secrecy_attack_concrete(
    explorer: &Explorer<'_>,
    targets: Option<&[Target]>,
    seed: u32,
) -> Result<SearchOutcome, SearchError> {
    let plan = plan_targets(explorer.model, targets)?;
    concrete_search(explorer, plan, seed)
}

fn concrete_search(explorer: &Explorer<'_>, plan: TargetPlan, seed: u32) -> Result<SearchOutcome, SearchError> {
    let model = explorer.model;
    if plan.searched.is_empty() {
        return Ok(SearchOutcome {
            plan,
            attack: None,
            explored: 0,
            transitions: 0,
            proof: None,
        });
    }
    let searched = plan.searched.clone();
    let f = explorer.run(|_, _, s, _, new| new && violation(model, s, &searched).is_some());
    let mut best: Option<((usize, usize, Vec<String>), AttackReport)> = None;
    for &hit in &f.hits {
        let events = explorer.path(&f.parents, hit);
        let trace = normalize(model, &explorer.initial, &events, seed)?;
        let last = trace.last_state();
        let (ti, session) = violation(model, last, &searched).expect("hit states violate a target");
        let target = searched[ti].clone();
        let value = session
            .valuation
            .get_var(&target.var)
            .expect("violated target is bound")
            .clone();
        let inputs = intruder_inputs(model, explorer.bounds, &trace);
        let derivation = derivation(&Value::intruder(), AgentScope::All, &inputs, &value).unwrap_or_default();
        let lines = message_lines(&trace.events().cloned().collect::<Vec<_>>());
        let key = (ti, lines.len(), trace.events().map(|e| e.to_string()).collect());
        let report = AttackReport {
            target,
            session: session.clone(),
            value,
            derivation,
            lines,
            trace,
        };
        if best.as_ref().map_or(true, |(k, _)| key < *k) {
            best = Some((key, report));
        }
    }
    Ok(SearchOutcome {
        plan,
        attack: best.map(|(_, r)| r),
        explored: f.explored,
        transitions: f.transitions,
        proof: None,
    })
}

/// A receive attributing a message to an honest agent who never sent it
/// for that purpose.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AuthViolation {
    /// 1-based position of the receive in its trace.
    pub position: usize,
    pub receiver: Value,
    pub receiver_role: Var,
    pub claimed_sender: Value,
    pub sender_role: Var,
    pub index: usize,
    pub message: ConcreteTerm,
}

impl fmt::Display for AuthViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "event {:02}: {} (as {}) accepts `{}` as message {} from {} (as {}), who never sent it",
            self.position,
            self.receiver,
            self.receiver_role,
            self.message,
            self.index,
            self.claimed_sender,
            self.sender_role
        )
    }
}

fn auth_violation(p: &ProtocolTemplate, e: &Event, position: usize) -> AuthViolation {
    AuthViolation {
        position,
        receiver: e.receiver.clone(),
        receiver_role: e.role.clone(),
        claimed_sender: e.sender.clone(),
        sender_role: p.messages[e.index - 1].sender.clone(),
        index: e.index,
        message: e.message.clone(),
    }
}

/// Checks that every receive attributed to an honest agent is preceded by a
/// send of the same message, by that agent, at the same protocol step.
pub fn check_authenticity(p: &ProtocolTemplate, events: &[Event]) -> Vec<AuthViolation> {
    let mut out = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if e.kind != EventKind::Receive || e.sender.is_intruder() {
            continue;
        }
        let sent = events[..i].iter().any(|s| {
            s.kind == EventKind::Send && s.sender == e.sender && s.index == e.index && s.message == e.message
        });
        if !sent {
            out.push(auth_violation(p, e, i + 1));
        }
    }
    out
}

/// The same check on a single transition, using the sessions of the source
/// state as the record of what honest agents have sent.
fn edge_authentic(model: &Model, from: &State, e: &Event) -> bool {
    if e.kind != EventKind::Receive || e.sender.is_intruder() {
        return true;
    }
    let template = &model.protocol.messages[e.index - 1];
    let Some(rm) = model.role(&template.sender) else { return false };
    let Some(pos) = rm.position(e.index) else { return false };
    from.sessions.iter().any(|s| {
        s.owner == e.sender
            && s.role == template.sender
            && s.length > pos
            && apply_valuation(&template.content, &s.valuation).as_ref() == Ok(&e.message)
    })
}

#[derive(Clone, Debug)]
pub struct AuthReport {
    pub explored: usize,
    pub transitions: usize,
    /// Distinct violating receives (by message and parties), first seen.
    pub violations: Vec<AuthViolation>,
    /// Number of violating transitions, counted with repetitions.
    pub violating_transitions: usize,
    /// Set when the abstraction proved every receive authentic.
    pub proof: Option<AbstractProof>,
}

/// Checks receive authenticity. The over-approximation is tried first;
/// failing a proof, the concrete search reports the shallowest violations.
pub fn authcheck(explorer: &Explorer<'_>) -> AuthReport {
    let sat = saturate(
        explorer.model,
        explorer.bounds,
        explorer.scenario,
        explorer.generator,
        &[],
        explorer.abstraction_limit,
    );
    if sat.complete && sat.unproven_receives().is_empty() {
        return AuthReport {
            explored: 0,
            transitions: 0,
            violations: Vec::new(),
            violating_transitions: 0,
            proof: Some(AbstractProof::of(&sat)),
        };
    }
    concrete_authcheck(explorer, true)
}

/// Concrete authenticity check. With `stop_early` the search ends at the
/// depth of the first violation, otherwise the whole space is explored.
pub fn concrete_authcheck(explorer: &Explorer<'_>, stop_early: bool) -> AuthReport {
    let model = explorer.model;
    let mut seen = BTreeSet::new();
    let mut violations = Vec::new();
    let mut count = 0;
    // Only the first event of a macro transition can be a receive.
    let f = explorer.run(|from, events, _, depth, _| {
        let mut bad = false;
        for (j, e) in events.iter().enumerate() {
            if !edge_authentic(model, from, e) {
                bad = true;
                count += 1;
                let v = auth_violation(&model.protocol, e, depth + j + 1);
                let key = (v.receiver_role.clone(), v.index, v.claimed_sender.clone(), v.receiver.clone(), v.message.clone());
                if seen.insert(key) {
                    violations.push(v);
                }
            }
        }
        stop_early && bad
    });
    AuthReport {
        explored: f.explored,
        transitions: f.transitions,
        violations,
        violating_transitions: count,
        proof: None,
    }
}
