//! Operational semantics: partial sessions, send and receive transitions
//! and the evolution of the intruder's knowledge.
//!
//! Every transition is an [`Event`] carrying the full extended valuation of
//! the session it advances. [`step`] re-validates events against the
//! transition rules, so the successor generators only need to propose
//! candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::fmt;

use thiserror::Error;

use crate::deduction::{
    intruder_can_derive_with, intruder_close, intruder_key_usable, observed_cyphers, KnowledgeSet,
};
use crate::protocol::{check_realizable, components, MessageTemplate, ProtocolError, ProtocolTemplate};
use crate::term::{
    apply_valuation, constant_value, Atom, ConcreteTerm, Fresh, Sort, SymbolicTerm, Term, TermError,
    Valuation, Value, Var, INTRUDER,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemanticsError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("event not enabled: {0}")]
    NotEnabled(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

fn not_enabled(msg: impl Into<String>) -> SemanticsError {
    SemanticsError::NotEnabled(msg.into())
}

/// Precomputed session template of one role: its messages and the knowledge
/// (with its component templates) after each of them.
#[derive(Clone, Debug)]
pub struct RoleModel {
    pub role: Var,
    pub messages: Vec<MessageTemplate>,
    /// `rows[l]` is the knowledge after `l` messages.
    pub rows: Vec<KnowledgeSet<Var>>,
    pub components: Vec<BTreeSet<SymbolicTerm>>,
}

impl RoleModel {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Whether the role sends the message following length `l`.
    pub fn sends_at(&self, l: usize) -> bool {
        self.messages.get(l).is_some_and(|m| m.sender == self.role)
    }

    /// Position in the session of protocol message `index`.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.messages.iter().position(|m| m.index == index)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub protocol: ProtocolTemplate,
    pub roles: Vec<RoleModel>,
}

impl Model {
    pub fn new(p: &ProtocolTemplate) -> Result<Model, SemanticsError> {
        let tables = check_realizable(p).into_result()?;
        let roles = tables
            .into_iter()
            .map(|t| {
                let messages = t
                    .messages
                    .iter()
                    .map(|i| p.messages[i - 1].clone())
                    .collect();
                let components = t.rows.iter().map(components).collect();
                RoleModel {
                    role: t.role,
                    messages,
                    rows: t.rows,
                    components,
                }
            })
            .collect();
        Ok(Model {
            protocol: p.clone(),
            roles,
        })
    }

    pub fn role(&self, r: &Var) -> Option<&RoleModel> {
        self.roles.iter().find(|m| &m.role == r)
    }
}

/// Limits that make the transition system finite.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub max_sessions: usize,
    pub max_events: usize,
    /// Maximum nesting of cyphers the intruder builds itself.
    pub max_synth_depth: usize,
    /// Number of intruder-owned nonces and of intruder-owned keys.
    pub intruder_fresh: u32,
    /// Agents that may be bound to role variables; contains the intruder.
    pub agent_pool: Vec<Value>,
}

impl Bounds {
    /// Two sessions per role, twelve events, synthesis depth two, one
    /// intruder nonce and key, and one agent per role (its lowercased name)
    /// plus the intruder.
    pub fn for_protocol(p: &ProtocolTemplate) -> Bounds {
        Bounds {
            max_sessions: 2,
            max_events: 12,
            max_synth_depth: 2,
            intruder_fresh: 1,
            agent_pool: default_pool(p),
        }
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        let intruders = self.agent_pool.iter().filter(|a| a.is_intruder()).count();
        if intruders != 1 {
            return Err(SemanticsError::InvalidBounds(format!(
                "agent pool must contain `{INTRUDER}` exactly once"
            )));
        }
        if self.agent_pool.iter().any(|a| a.sort() != Sort::Agent) {
            return Err(SemanticsError::InvalidBounds("agent pool holds a non-agent".into()));
        }
        Ok(())
    }
}

fn default_pool(p: &ProtocolTemplate) -> Vec<Value> {
    let mut pool: Vec<Value> = p.roles.iter().map(|r| Value::agent(&default_agent_name(r))).collect();
    pool.push(Value::intruder());
    pool.dedup();
    pool
}

fn default_agent_name(r: &Var) -> String {
    let lower = r.name().to_lowercase();
    if lower == INTRUDER {
        format!("{lower}0")
    } else {
        lower
    }
}

/// Which honest agents may start sessions of which roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub starters: Vec<(Var, Value)>,
}

impl Scenario {
    /// Role `R` is played by the agent named after it in lowercase.
    pub fn default_for(p: &ProtocolTemplate) -> Scenario {
        Scenario {
            starters: p
                .roles
                .iter()
                .map(|r| (r.clone(), Value::agent(&default_agent_name(r))))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartialSession {
    /// Stable identity of the session within a run.
    pub sid: u32,
    pub role: Var,
    pub owner: Value,
    pub length: usize,
    pub valuation: Valuation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct State {
    pub sessions: Vec<PartialSession>,
    pub intruder: Arc<KnowledgeSet<Value>>,
    /// Cyphers the intruder has seen and may replay.
    pub observed: Arc<BTreeSet<ConcreteTerm>>,
    /// Above every honest fresh value occurring in the state.
    pub next_fresh: u32,
    pub next_sid: u32,
}

impl State {
    pub fn session(&self, sid: u32) -> Option<&PartialSession> {
        self.sessions.iter().find(|s| s.sid == sid)
    }

    pub fn can_derive(&self, t: &ConcreteTerm) -> bool {
        intruder_can_derive_with(&self.intruder, &self.observed, t)
    }

    fn used_fresh(&self) -> BTreeSet<Fresh> {
        let mut out = BTreeSet::new();
        let mut note = |t: &ConcreteTerm| {
            for a in t.atoms() {
                if let Some(f) = a.fresh() {
                    out.insert(f);
                }
            }
        };
        for s in &self.sessions {
            s.valuation.values().for_each(&mut note);
        }
        self.intruder.iter().for_each(&mut note);
        self.observed.iter().for_each(&mut note);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Send,
    Receive,
}

/// A send or receive transition. `sender` and `receiver` are the claimed
/// parties of the message; the actor is the sender of a send and the
/// receiver of a receive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub kind: EventKind,
    pub sid: u32,
    pub role: Var,
    /// Protocol index of the message.
    pub index: usize,
    pub sender: Value,
    pub receiver: Value,
    pub message: ConcreteTerm,
    /// The session's valuation after the event.
    pub valuation: Valuation,
}

impl Event {
    pub fn actor(&self) -> &Value {
        match self.kind {
            EventKind::Send => &self.sender,
            EventKind::Receive => &self.receiver,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EventKind::Send => "send",
            EventKind::Receive => "recv",
        };
        write!(
            f,
            "{kind} #{} {}.{}: {} -> {} : {}",
            self.sid, self.role, self.index, self.sender, self.receiver, self.message
        )
    }
}

/// A run from the initial state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub initial: State,
    pub steps: Vec<(Event, State)>,
}

impl Trace {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.steps.iter().map(|(e, _)| e)
    }

    pub fn last_state(&self) -> &State {
        self.steps.last().map_or(&self.initial, |(_, s)| s)
    }

    /// Replays the events from the initial state, checking every step.
    pub fn replay(model: &Model, initial: State, events: &[Event]) -> Result<Trace, SemanticsError> {
        let mut steps = Vec::with_capacity(events.len());
        let mut cur = initial.clone();
        for e in events {
            cur = step(model, &cur, e)?;
            steps.push((e.clone(), cur.clone()));
        }
        Ok(Trace { initial, steps })
    }
}

/// The state with no sessions; the intruder knows the protocol's initial
/// intruder knowledge and its own pool of fresh values.
pub fn initial_state(model: &Model, bounds: &Bounds, seed: u32) -> State {
    let mut init: Vec<ConcreteTerm> = model.protocol.intruder_initial.clone();
    for i in 1..=bounds.intruder_fresh {
        init.push(Term::Atom(Value::Nonce(Fresh::intruder(i))));
        init.push(Term::Atom(Value::Key(Fresh::intruder(i))));
    }
    let intruder = intruder_close(&KnowledgeSet::new(), init.iter().cloned());
    let observed = observed_cyphers(&intruder, &init);
    State {
        sessions: Vec::new(),
        intruder: Arc::new(intruder),
        observed: Arc::new(observed),
        next_fresh: seed.max(1),
        next_sid: 0,
    }
}

/// Evaluates a component template from its parts, ignoring any binding of
/// the template itself.
pub(crate) fn eval_parts(c: &SymbolicTerm, v: &Valuation) -> Result<ConcreteTerm, TermError> {
    match c {
        Term::Enc(body, key) => Term::try_enc(apply_valuation(body, v)?, apply_valuation(key, v)?),
        other => apply_valuation(other, v),
    }
}

pub(crate) fn honest_roles_distinct(p: &ProtocolTemplate, v: &Valuation) -> bool {
    let mut seen = BTreeSet::new();
    p.roles
        .iter()
        .filter_map(|r| v.agent(r))
        .filter(|a| !a.is_intruder())
        .all(|a| seen.insert(a.clone()))
}

/// Applies an event, checking it against the transition rules.
pub fn step(model: &Model, state: &State, event: &Event) -> Result<State, SemanticsError> {
    let rm = model
        .role(&event.role)
        .ok_or_else(|| not_enabled(format!("unknown role {}", event.role)))?;
    let actor = event.actor().clone();
    let spawn = event.sid == state.next_sid;
    let (pos, length, old) = if spawn {
        if actor.is_intruder() || actor.sort() != Sort::Agent {
            return Err(not_enabled("sessions are started by honest agents"));
        }
        (None, 0, Valuation::new())
    } else {
        let (pos, s) = state
            .sessions
            .iter()
            .enumerate()
            .find(|(_, s)| s.sid == event.sid)
            .ok_or_else(|| not_enabled(format!("no session #{}", event.sid)))?;
        if s.role != event.role || s.owner != actor {
            return Err(not_enabled("session role or owner mismatch"));
        }
        (Some(pos), s.length, s.valuation.clone())
    };
    let msg = rm
        .messages
        .get(length)
        .ok_or_else(|| not_enabled("session already complete"))?;
    if msg.index != event.index {
        return Err(not_enabled(format!("expected message {}, got {}", msg.index, event.index)));
    }
    let sends = msg.sender == rm.role;
    if sends != (event.kind == EventKind::Send) {
        return Err(not_enabled("wrong direction for this message"));
    }
    let v = &event.valuation;
    let next = &rm.rows[length + 1];
    let next_comps = &rm.components[length + 1];
    if v.iter().map(|(t, _)| t).ne(next_comps.iter()) {
        return Err(not_enabled("valuation domain differs from the knowledge components"));
    }
    if v.get_var(&rm.role) != Some(&Term::Atom(actor.clone())) {
        return Err(not_enabled("role variable not bound to the actor"));
    }
    let partner = msg.partner(&rm.role);
    let counterpart = match event.kind {
        EventKind::Send => &event.receiver,
        EventKind::Receive => &event.sender,
    };
    if v.get_var(partner) != Some(&Term::Atom(counterpart.clone())) {
        return Err(not_enabled("claimed partner does not match the valuation"));
    }
    if !honest_roles_distinct(&model.protocol, v) {
        return Err(not_enabled("an honest agent plays two roles in one session"));
    }

    // Values fixed before the event: for a spawn, the initial knowledge is
    // valued by the event itself.
    let none = BTreeSet::new();
    let prev_comps: &BTreeSet<SymbolicTerm> = if spawn { &none } else { &rm.components[length] };
    let prev_crypto = if spawn { &none } else { rm.rows[length].crypto() };
    for c in prev_comps {
        let was = old.get(c).expect("session valuation covers its components");
        let now = if next.crypto().contains(c) || matches!(c, Term::Atom(_)) {
            v.get(c).cloned()
        } else {
            eval_parts(c, v).ok()
        };
        if now.as_ref() != Some(was) {
            return Err(not_enabled(format!("`{c}` changes value")));
        }
    }

    let mut new_fresh = BTreeSet::new();
    let mut new_vars: Vec<&Var> = next_comps
        .iter()
        .filter(|c| !prev_comps.contains(c))
        .filter_map(|c| match c {
            Term::Atom(x) => Some(x),
            _ => None,
        })
        .collect();
    if spawn {
        // initial knowledge is valued at the spawn
        new_vars.retain(|x| *x != &rm.role);
    }
    // every honest value in a state is numbered below `next_fresh`, so the
    // scan is only needed for values numbered lower
    let low = new_vars.iter().filter(|x| sends || spawn && rm.components[0].contains(&Term::Atom(Var::clone(x)))).any(|x| {
        v.get_var(x)
            .and_then(|t| t.as_atom())
            .and_then(Value::fresh)
            .is_some_and(|f| f.id < state.next_fresh)
    });
    let used = if (sends || spawn) && low { state.used_fresh() } else { BTreeSet::new() };
    for x in &new_vars {
        let value = v.get_var(x).expect("domain checked");
        let generated = sends || (spawn && rm.components[0].contains(&Term::Atom(Var::clone(x))));
        if matches!(x.sort(), Sort::Nonce | Sort::ShortKey) && generated {
            let Some(f) = value.as_atom().and_then(Value::fresh) else {
                return Err(not_enabled(format!("`{x}` needs a fresh value")));
            };
            if f.intruder || used.contains(&f) || !new_fresh.insert(f) {
                return Err(not_enabled(format!("value `{value}` of `{x}` is not fresh")));
            }
        }
    }
    for c in next_comps.iter().filter(|c| c.is_enc()) {
        let generated_here = sends && !prev_crypto.contains(c);
        let initial = spawn && rm.components[0].contains(c);
        if generated_here || initial {
            if eval_parts(c, v).ok().as_ref() != v.get(c) {
                return Err(not_enabled(format!("`{c}` does not evaluate to its value")));
            }
        }
    }

    let message = apply_valuation(&msg.content, v)
        .map_err(|e| not_enabled(format!("message does not evaluate: {e}")))?;
    if message != event.message {
        return Err(not_enabled(format!("message differs from `{message}`")));
    }
    if !sends && !state.can_derive(&message) {
        return Err(not_enabled(format!("intruder cannot derive `{message}`")));
    }

    let mut out = state.clone();
    let session = PartialSession {
        sid: event.sid,
        role: rm.role.clone(),
        owner: actor,
        length: length + 1,
        valuation: v.clone(),
    };
    match pos {
        Some(i) => out.sessions[i] = session,
        None => {
            out.sessions.push(session);
            out.next_sid += 1;
        }
    }
    if let Some(max) = new_fresh.iter().map(|f| f.id).max() {
        out.next_fresh = out.next_fresh.max(max + 1);
    }
    if sends {
        out.intruder = Arc::new(intruder_close(&state.intruder, [message.clone()]));
        let mut observed = (*state.observed).clone();
        observed.extend(observed_cyphers(
            &out.intruder,
            state.observed.iter().chain([&message]),
        ));
        out.observed = Arc::new(observed);
    }
    Ok(out)
}

/// A place where a session can take its next step: an existing session or
/// a session about to be started with a given initial valuation.
#[derive(Clone, Debug)]
pub struct Site<'m> {
    pub sid: u32,
    pub role: &'m RoleModel,
    pub length: usize,
    pub owner: Value,
    pub valuation: Valuation,
    /// Fresh counter available for values generated at this site.
    pub next_fresh: u32,
}

impl Site<'_> {
    pub fn message(&self) -> &MessageTemplate {
        &self.role.messages[self.length]
    }
}

pub(crate) fn agent_choices(pool: &[Value], vars: &[&Var], base: &Valuation, p: &ProtocolTemplate) -> Vec<Valuation> {
    let mut out = vec![base.clone()];
    for x in vars {
        let mut next = Vec::new();
        for v in &out {
            for a in pool {
                let mut w = v.clone();
                if w.bind(Term::Atom((*x).clone()), Term::Atom(a.clone())).is_ok()
                    && honest_roles_distinct(p, &w)
                {
                    next.push(w);
                }
            }
        }
        out = next;
    }
    out
}

fn fresh_value(x: &Var, id: u32) -> ConcreteTerm {
    let f = Fresh::honest(id);
    Term::Atom(match x.sort() {
        Sort::Nonce => Value::Nonce(f),
        _ => Value::Key(f),
    })
}

/// Binds the fresh and agent variables of `vars` not yet in `base`, then
/// evaluates the listed crypto components.
fn extend_generated<'a>(
    model: &Model,
    bounds: &Bounds,
    base: &Valuation,
    vars: impl IntoIterator<Item = &'a Var>,
    crypto: impl IntoIterator<Item = &'a SymbolicTerm> + Clone,
    mut next_fresh: u32,
) -> Vec<(Valuation, u32)> {
    let mut v = base.clone();
    let mut agents = Vec::new();
    for x in vars {
        if v.get_var(x).is_some() {
            continue;
        }
        match x.sort() {
            Sort::Agent => agents.push(x),
            Sort::Nonce | Sort::ShortKey => {
                v.bind(Term::Atom(x.clone()), fresh_value(x, next_fresh))
                    .expect("fresh variable is unbound");
                next_fresh += 1;
            }
            Sort::Constant => {}
        }
    }
    agent_choices(&bounds.agent_pool, &agents, &v, &model.protocol)
        .into_iter()
        .filter_map(|mut w| {
            for c in crypto.clone() {
                if !w.contains(c) {
                    let value = eval_parts(c, &w).ok()?;
                    w.bind(c.clone(), value).ok()?;
                }
            }
            Some((w, next_fresh))
        })
        .collect()
}

/// Existing unfinished sessions and the sessions the scenario may start.
pub fn sites<'m>(model: &'m Model, state: &State, bounds: &Bounds, scenario: &Scenario) -> Vec<Site<'m>> {
    let mut out = Vec::new();
    for s in &state.sessions {
        let rm = model.role(&s.role).expect("session of a protocol role");
        if s.length < rm.len() {
            out.push(Site {
                sid: s.sid,
                role: rm,
                length: s.length,
                owner: s.owner.clone(),
                valuation: s.valuation.clone(),
                next_fresh: state.next_fresh,
            });
        }
    }
    let mut started: BTreeMap<&Var, usize> = BTreeMap::new();
    for s in &state.sessions {
        *started.entry(&s.role).or_default() += 1;
    }
    let mut seen_spawns = BTreeSet::new();
    for (role, owner) in &scenario.starters {
        let Some(rm) = model.role(role) else { continue };
        if rm.is_empty() || started.get(role).copied().unwrap_or(0) >= bounds.max_sessions {
            continue;
        }
        if !seen_spawns.insert((role, owner)) {
            continue;
        }
        let mut base = Valuation::new();
        base.bind(Term::Atom(role.clone()), Term::Atom(owner.clone()))
            .expect("role is an agent variable");
        let vars: Vec<&Var> = rm.components[0].iter().filter_map(|c| c.as_atom()).collect();
        let crypto: Vec<&SymbolicTerm> = rm.rows[0].crypto().iter().collect();
        for (valuation, next_fresh) in extend_generated(model, bounds, &base, vars, crypto, state.next_fresh) {
            out.push(Site {
                sid: state.next_sid,
                role: rm,
                length: 0,
                owner: owner.clone(),
                valuation,
                next_fresh,
            });
        }
    }
    out
}

/// Every send the state enables, with its successor.
pub fn enabled_sends(
    model: &Model,
    state: &State,
    bounds: &Bounds,
    scenario: &Scenario,
) -> Vec<(Event, State)> {
    let mut out = Vec::new();
    for site in sites(model, state, bounds, scenario) {
        site_sends(model, state, bounds, &site, &mut out);
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// The sends of one started session, if it is due to send.
pub fn session_sends(model: &Model, state: &State, bounds: &Bounds, sid: u32) -> Vec<(Event, State)> {
    let mut out = Vec::new();
    let Some(s) = state.session(sid) else { return out };
    let rm = model.role(&s.role).expect("session of a protocol role");
    if s.length < rm.len() {
        let site = Site {
            sid,
            role: rm,
            length: s.length,
            owner: s.owner.clone(),
            valuation: s.valuation.clone(),
            next_fresh: state.next_fresh,
        };
        site_sends(model, state, bounds, &site, &mut out);
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn site_sends(model: &Model, state: &State, bounds: &Bounds, site: &Site<'_>, out: &mut Vec<(Event, State)>) {
    if !site.role.sends_at(site.length) {
        return;
    }
    let msg = site.message();
    let next_comps = &site.role.components[site.length + 1];
    let vars: Vec<&Var> = next_comps.iter().filter_map(|c| c.as_atom()).collect();
    let crypto: Vec<&SymbolicTerm> = next_comps.iter().filter(|c| c.is_enc()).collect();
    for (mut v, _) in extend_generated(model, bounds, &site.valuation, vars, crypto, site.next_fresh) {
        v.retain(|t| next_comps.contains(t));
        let Ok(message) = apply_valuation(&msg.content, &v) else { continue };
        let Some(receiver) = v.agent(&msg.receiver).cloned() else { continue };
        let event = Event {
            kind: EventKind::Send,
            sid: site.sid,
            role: site.role.role.clone(),
            index: msg.index,
            sender: site.owner.clone(),
            receiver,
            message,
            valuation: v,
        };
        if let Ok(next) = step(model, state, &event) {
            out.push((event, next));
        }
    }
}

/// Proposes the messages (with their claimed sender) an intruder might
/// offer at a receive site. Proposals are filtered by [`step`].
pub trait ReceiveGenerator {
    fn candidates(&self, model: &Model, state: &State, bounds: &Bounds, site: &Site<'_>)
        -> BTreeSet<(Value, ConcreteTerm)>;
}

/// Template-directed generation: only messages shaped like the expected
/// template are built, with cyphers either replayed or built by the
/// intruder up to the synthesis depth.
#[derive(Clone, Copy, Debug, Default)]
pub struct LazyIntruder;

struct GenCtx<'a> {
    pool: &'a [Value],
    state: &'a State,
    opaque: &'a BTreeSet<SymbolicTerm>,
    max_depth: usize,
}

impl GenCtx<'_> {
    fn gen(&self, t: &SymbolicTerm, v: &Valuation, depth: usize) -> Vec<(ConcreteTerm, Valuation)> {
        if let Some(value) = v.get(t) {
            return vec![(value.clone(), v.clone())];
        }
        match t {
            Term::Atom(c) if c.sort() == Sort::Constant => vec![(Term::Atom(constant_value(c)), v.clone())],
            Term::Atom(x) => {
                let values: Vec<ConcreteTerm> = match x.sort() {
                    Sort::Agent => self.pool.iter().cloned().map(Term::Atom).collect(),
                    sort => self
                        .state
                        .intruder
                        .basic()
                        .iter()
                        .filter(|b| b.as_atom().is_some_and(|a| a.sort() == sort))
                        .cloned()
                        .collect(),
                };
                values
                    .into_iter()
                    .filter_map(|val| {
                        let mut w = v.clone();
                        w.bind(t.clone(), val.clone()).ok()?;
                        Some((val, w))
                    })
                    .collect()
            }
            Term::Pk(x) | Term::Sk(x) => self
                .gen(&Term::Atom(x.clone()), v, depth)
                .into_iter()
                .map(|(a, w)| {
                    let a = a.as_atom().expect("agent value").clone();
                    let key = if matches!(t, Term::Pk(_)) { Term::Pk(a) } else { Term::Sk(a) };
                    (key, w)
                })
                .collect(),
            Term::Shk(x, y) => {
                let mut out = Vec::new();
                for (a, w) in self.gen(&Term::Atom(x.clone()), v, depth) {
                    for (b, w2) in self.gen(&Term::Atom(y.clone()), &w, depth) {
                        let a = a.as_atom().expect("agent value").clone();
                        let b = b.as_atom().expect("agent value").clone();
                        out.push((Term::shk(a, b), w2));
                    }
                }
                out
            }
            Term::Tuple(items) => {
                let mut partial: Vec<(Vec<ConcreteTerm>, Valuation)> = vec![(Vec::new(), v.clone())];
                for item in items {
                    let mut next = Vec::new();
                    for (prefix, w) in &partial {
                        for (x, w2) in self.gen(item, w, depth) {
                            let mut p = prefix.clone();
                            p.push(x);
                            next.push((p, w2));
                        }
                    }
                    partial = next;
                }
                partial.into_iter().map(|(xs, w)| (Term::tuple(xs), w)).collect()
            }
            Term::Enc(body, key) => {
                let mut out = Vec::new();
                let opaque = self.opaque.contains(t);
                for e in self.state.observed.iter() {
                    if !opaque && !could_match(t, e, v) {
                        continue;
                    }
                    let mut w = v.clone();
                    let ok = if opaque {
                        w.bind(t.clone(), e.clone()).is_ok()
                    } else {
                        match_into(t, e, &mut w, self.opaque)
                    };
                    if ok {
                        out.push((e.clone(), w));
                    }
                }
                if depth < self.max_depth {
                    for (k, w) in self.gen(key, v, depth) {
                        if !intruder_key_usable(&self.state.intruder, &k) {
                            continue;
                        }
                        for (b, w2) in self.gen(body, &w, depth + 1) {
                            let e = Term::enc(b, k.clone());
                            if opaque {
                                // the receiver cannot look inside, so inner
                                // choices do not constrain the rest
                                let mut w3 = w.clone();
                                if w3.bind(t.clone(), e.clone()).is_ok() {
                                    out.push((e, w3));
                                }
                            } else {
                                out.push((e, w2));
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

impl ReceiveGenerator for LazyIntruder {
    fn candidates(
        &self,
        _model: &Model,
        state: &State,
        bounds: &Bounds,
        site: &Site<'_>,
    ) -> BTreeSet<(Value, ConcreteTerm)> {
        let msg = site.message();
        let ctx = GenCtx {
            pool: &bounds.agent_pool,
            state,
            opaque: site.role.rows[site.length + 1].crypto(),
            max_depth: bounds.max_synth_depth,
        };
        let mut out = BTreeSet::new();
        for (m, w) in ctx.gen(&msg.content, &site.valuation, 0) {
            match w.agent(&msg.sender) {
                Some(b) => {
                    out.insert((b.clone(), m));
                }
                None => {
                    for b in &bounds.agent_pool {
                        out.insert((b.clone(), m.clone()));
                    }
                }
            }
        }
        out
    }
}

/// Cheap necessary condition for `match_into`: shapes, constants and
/// already bound parts agree.
fn could_match(t: &SymbolicTerm, m: &ConcreteTerm, v: &Valuation) -> bool {
    if let Some(value) = v.get(t) {
        return value == m;
    }
    match (t, m) {
        (Term::Atom(c), _) if c.sort() == Sort::Constant => *m == Term::Atom(constant_value(c)),
        (Term::Atom(_), Term::Atom(_)) => true,
        (Term::Enc(tb, tk), Term::Enc(mb, mk)) => could_match(tk, mk, v) && could_match(tb, mb, v),
        (Term::Tuple(ts), Term::Tuple(ms)) => {
            ts.len() == ms.len() && ts.iter().zip(ms).all(|(a, b)| could_match(a, b, v))
        }
        (Term::Pk(x), Term::Pk(a)) | (Term::Sk(x), Term::Sk(a)) => {
            v.get_var(x).map_or(true, |b| *b == Term::Atom(a.clone()))
        }
        (Term::Shk(..), Term::Shk(..)) => true,
        _ => false,
    }
}

/// Structural matching of a template against a concrete term, extending
/// `v`. Components in `opaque` are bound whole.
pub fn match_into(
    t: &SymbolicTerm,
    m: &ConcreteTerm,
    v: &mut Valuation,
    opaque: &BTreeSet<SymbolicTerm>,
) -> bool {
    if let Some(value) = v.get(t) {
        return value == m;
    }
    match (t, m) {
        (Term::Atom(c), _) if c.sort() == Sort::Constant => *m == Term::Atom(constant_value(c)),
        (Term::Atom(_), Term::Atom(_)) => v.bind(t.clone(), m.clone()).is_ok(),
        (Term::Enc(..), Term::Enc(..)) if opaque.contains(t) => v.bind(t.clone(), m.clone()).is_ok(),
        (Term::Enc(tb, tk), Term::Enc(mb, mk)) => {
            match_into(tk, mk, v, opaque) && match_into(tb, mb, v, opaque)
        }
        (Term::Tuple(ts), Term::Tuple(ms)) => {
            ts.len() == ms.len() && ts.iter().zip(ms).all(|(a, b)| match_into(a, b, v, opaque))
        }
        (Term::Pk(x), Term::Pk(a)) | (Term::Sk(x), Term::Sk(a)) => {
            v.bind(Term::Atom(x.clone()), Term::Atom(a.clone())).is_ok()
        }
        (Term::Shk(x, y), Term::Shk(a, b)) => {
            let mut w = v.clone();
            let bind = |w: &mut Valuation, p: &Value, q: &Value| {
                w.bind(Term::Atom(x.clone()), Term::Atom(p.clone())).is_ok()
                    && w.bind(Term::Atom(y.clone()), Term::Atom(q.clone())).is_ok()
            };
            if bind(&mut w, a, b) {
                *v = w;
                true
            } else {
                bind(v, b, a)
            }
        }
        _ => false,
    }
}

/// The valuation a receive site would reach by accepting `m` as sent by
/// `claimed`, if the receiver's equality tests pass.
pub fn try_receive(site: &Site<'_>, claimed: &Value, m: &ConcreteTerm) -> Option<Valuation> {
    let rm = site.role;
    let l = site.length;
    let msg = &rm.messages[l];
    let opaque = rm.rows[l + 1].crypto();
    let mut v = site.valuation.clone();
    v.bind(Term::Atom(msg.sender.clone()), Term::Atom(claimed.clone())).ok()?;
    for c in rm.rows[l].crypto() {
        if !opaque.contains(c) {
            // a cypher held opaque so far can now be opened: its contents
            // must agree with the rest of the session
            let value = v.remove(c)?;
            if !match_into(c, &value, &mut v, opaque) {
                return None;
            }
        }
    }
    if !match_into(&msg.content, m, &mut v, opaque) {
        return None;
    }
    let comps = &rm.components[l + 1];
    v.retain(|t| comps.contains(t));
    (v.len() == comps.len()).then_some(v)
}

/// Every receive the state enables under `generator`, with its successor.
pub fn enabled_receives(
    model: &Model,
    state: &State,
    bounds: &Bounds,
    scenario: &Scenario,
    generator: &dyn ReceiveGenerator,
) -> Vec<(Event, State)> {
    let mut out = Vec::new();
    for site in sites(model, state, bounds, scenario) {
        if site.role.sends_at(site.length) {
            continue;
        }
        let msg = site.message();
        for (claimed, m) in generator.candidates(model, state, bounds, &site) {
            let Some(v) = try_receive(&site, &claimed, &m) else { continue };
            let event = Event {
                kind: EventKind::Receive,
                sid: site.sid,
                role: site.role.role.clone(),
                index: msg.index,
                sender: claimed,
                receiver: site.owner.clone(),
                message: m,
                valuation: v,
            };
            if let Ok(next) = step(model, state, &event) {
                out.push((event, next));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.dedup_by(|a, b| a.0 == b.0);
    out
}

/// All successors: sends first, then receives, each in event order.
pub fn successors(
    model: &Model,
    state: &State,
    bounds: &Bounds,
    scenario: &Scenario,
    generator: &dyn ReceiveGenerator,
) -> Vec<(Event, State)> {
    let mut out = enabled_sends(model, state, bounds, scenario);
    out.extend(enabled_receives(model, state, bounds, scenario, generator));
    out
}
