//! Over-approximation of the bounded state space by independent session
//! instances sharing one monotone intruder knowledge.
//!
//! Each instance (role, owner, index) may take every branch at once, and a
//! value generated by an instance is named after the instance, the variable
//! and the agents bound at that point. Within any concrete run these names
//! are distinct, so every concrete run maps onto facts derived here: if no
//! fact breaks a secret, no run within the bounds does. The event bound is
//! ignored, which only adds behaviour.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use crate::deduction::{intruder_close, intruder_key_usable, observed_cyphers};
use crate::semantics::{
    agent_choices, eval_parts, honest_roles_distinct, initial_state, step, try_receive, Bounds, Event, EventKind,
    Model, PartialSession, ReceiveGenerator, RoleModel, Scenario, Site, State,
};
use crate::term::{apply_valuation, Atom, ConcreteTerm, Fresh, Sort, SymbolicTerm, Term, Valuation, Value, Var};

use super::{secrecy_violated, Target};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Instance {
    role: Var,
    owner: Value,
}

/// One reachable local state of an instance. Length 0 means not started.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Fact {
    instance: usize,
    length: usize,
    valuation: Valuation,
}

/// A local state of some session that breaks a target in the
/// over-approximation. It may or may not be reachable.
#[derive(Clone, Debug)]
pub struct Suspect {
    pub target: Target,
    pub session: PartialSession,
}

#[derive(Clone, Debug)]
pub struct Saturation {
    /// Distinct instance states derived.
    pub facts: usize,
    /// Distinct (sender, protocol index, message) sends.
    pub sends: BTreeSet<(Value, usize, ConcreteTerm)>,
    pub rounds: usize,
    /// False when the fact budget ran out; nothing is then proved.
    pub complete: bool,
    /// Final intruder knowledge.
    pub knowledge: State,
    pub suspects: Vec<Suspect>,
    /// Accepted receives, with the claimed sender and the receiver's index
    /// and message, for the authenticity check.
    pub receives: Vec<Event>,
}

struct Namer {
    ids: HashMap<(usize, Var, Vec<(Var, Value)>), u32>,
}

impl Namer {
    fn name(&mut self, instance: usize, x: &Var, v: &Valuation) -> ConcreteTerm {
        let agents: Vec<(Var, Value)> = v
            .iter()
            .filter_map(|(t, val)| match (t, val) {
                (Term::Atom(y), Term::Atom(a)) if y.sort() == Sort::Agent => Some((y.clone(), a.clone())),
                _ => None,
            })
            .collect();
        let next = self.ids.len() as u32 + 1;
        let id = *self.ids.entry((instance, x.clone(), agents)).or_insert(next);
        let f = Fresh::honest(id);
        Term::Atom(match x.sort() {
            Sort::Nonce => Value::Nonce(f),
            _ => Value::Key(f),
        })
    }
}

struct Saturator<'a> {
    model: &'a Model,
    bounds: &'a Bounds,
    generator: &'a dyn ReceiveGenerator,
    instances: Vec<Instance>,
    namer: Namer,
    seen: HashSet<Fact>,
    facts: Vec<Fact>,
    sent: BTreeSet<ConcreteTerm>,
    sends: BTreeSet<(Value, usize, ConcreteTerm)>,
    receives: Vec<Event>,
}

impl<'a> Saturator<'a> {
    fn role(&self, f: &Fact) -> &'a RoleModel {
        self.model
            .role(&self.instances[f.instance].role)
            .expect("instance of a protocol role")
    }

    fn add(&mut self, f: Fact, queue: &mut Vec<usize>) {
        if self.seen.insert(f.clone()) {
            queue.push(self.facts.len());
            self.facts.push(f);
        }
    }

    /// Binds agent variables from the pool and names generated values.
    fn extend(&mut self, instance: usize, base: &Valuation, comps: &BTreeSet<SymbolicTerm>) -> Vec<Valuation> {
        let agents: Vec<&Var> = comps
            .iter()
            .filter_map(|c| c.as_atom())
            .filter(|x| x.sort() == Sort::Agent && base.get_var(x).is_none())
            .collect();
        let mut out = Vec::new();
        for mut w in agent_choices(&self.bounds.agent_pool, &agents, base, &self.model.protocol) {
            let fresh: Vec<&Var> = comps
                .iter()
                .filter_map(|c| c.as_atom())
                .filter(|x| matches!(x.sort(), Sort::Nonce | Sort::ShortKey) && w.get_var(x).is_none())
                .collect();
            for x in fresh {
                let value = self.namer.name(instance, x, &w);
                w.bind(Term::Atom(x.clone()), value).expect("fresh variable is unbound");
            }
            let crypto: Vec<&SymbolicTerm> = comps.iter().filter(|c| c.is_enc() && !w.contains(c)).collect();
            let ok = crypto.into_iter().all(|c| match eval_parts(c, &w) {
                Ok(value) => w.bind(c.clone(), value).is_ok(),
                Err(_) => false,
            });
            if ok {
                out.push(w);
            }
        }
        out
    }

    fn session(&self, f: &Fact) -> PartialSession {
        let inst = &self.instances[f.instance];
        PartialSession {
            sid: 0,
            role: inst.role.clone(),
            owner: inst.owner.clone(),
            length: f.length,
            valuation: f.valuation.clone(),
        }
    }

    fn site(&self, f: &Fact) -> Site<'a> {
        Site {
            sid: 0,
            role: self.role(f),
            length: f.length,
            owner: self.instances[f.instance].owner.clone(),
            valuation: f.valuation.clone(),
            next_fresh: 1,
        }
    }

    /// The state `step` sees for this fact: the session alone, plus
    /// `knowledge` when a receive must be derivable.
    fn local(&self, f: &Fact, knowledge: Option<&State>) -> State {
        let mut s = match knowledge {
            Some(k) => k.clone(),
            None => initial_state(self.model, self.bounds, 1),
        };
        s.sessions = if f.length == 0 { Vec::new() } else { vec![self.session(f)] };
        let top = f
            .valuation
            .values()
            .flat_map(|t| t.atoms())
            .filter_map(|a| a.fresh())
            .filter(|x| !x.intruder)
            .map(|x| x.id + 1)
            .max();
        s.next_fresh = s.next_fresh.max(top.unwrap_or(0));
        s.next_sid = u32::from(f.length > 0);
        s
    }

    fn send(&mut self, i: usize, queue: &mut Vec<usize>) {
        let f = self.facts[i].clone();
        let rm = self.role(&f);
        let msg = &rm.messages[f.length];
        let next_comps = &rm.components[f.length + 1];
        let state = self.local(&f, None);
        for mut v in self.extend(f.instance, &f.valuation, next_comps) {
            v.retain(|t| next_comps.contains(t));
            let Ok(message) = apply_valuation(&msg.content, &v) else { continue };
            let Some(receiver) = v.agent(&msg.receiver).cloned() else { continue };
            let event = Event {
                kind: EventKind::Send,
                sid: 0,
                role: rm.role.clone(),
                index: msg.index,
                sender: self.instances[f.instance].owner.clone(),
                receiver,
                message: message.clone(),
                valuation: v.clone(),
            };
            if step(self.model, &state, &event).is_ok() {
                self.sends.insert((event.sender, msg.index, message.clone()));
                self.sent.insert(message);
                self.add(
                    Fact {
                        instance: f.instance,
                        length: f.length + 1,
                        valuation: v,
                    },
                    queue,
                );
            }
        }
    }

    fn receive(&mut self, i: usize, knowledge: &State, queue: &mut Vec<usize>) {
        let f = self.facts[i].clone();
        let site = self.site(&f);
        let rm = site.role;
        let msg = &rm.messages[f.length];
        for (claimed, m) in self.generator.candidates(self.model, knowledge, self.bounds, &site) {
            let Some(v) = try_receive(&site, &claimed, &m) else { continue };
            if !honest_roles_distinct(&self.model.protocol, &v) || !knowledge.can_derive(&m) {
                continue;
            }
            let next = Fact {
                instance: f.instance,
                length: f.length + 1,
                valuation: v.clone(),
            };
            if self.seen.contains(&next) {
                continue;
            }
            self.receives.push(Event {
                kind: EventKind::Receive,
                sid: f.instance as u32,
                role: rm.role.clone(),
                index: msg.index,
                sender: claimed,
                receiver: site.owner.clone(),
                message: m,
                valuation: v,
            });
            self.add(next, queue);
        }
    }
}

/// Derives every instance state and sendable message until nothing new
/// appears, then lists the facts breaking one of `targets`. Gives up once
/// more than `max_facts` facts are derived.
pub fn saturate(
    model: &Model,
    bounds: &Bounds,
    scenario: &Scenario,
    generator: &dyn ReceiveGenerator,
    targets: &[Target],
    max_facts: usize,
) -> Saturation {
    let mut owners = Vec::new();
    for (role, owner) in &scenario.starters {
        if model.role(role).is_some_and(|rm| !rm.is_empty()) && !owners.contains(&(role, owner)) {
            owners.push((role, owner));
        }
    }
    let instances: Vec<Instance> = owners
        .iter()
        .flat_map(|(role, owner)| {
            (0..bounds.max_sessions).map(|_| Instance {
                role: (*role).clone(),
                owner: (*owner).clone(),
            })
        })
        .collect();
    let mut sat = Saturator {
        model,
        bounds,
        generator,
        instances,
        namer: Namer { ids: HashMap::new() },
        seen: HashSet::new(),
        facts: Vec::new(),
        sent: BTreeSet::new(),
        sends: BTreeSet::new(),
        receives: Vec::new(),
    };
    let mut queue = Vec::new();
    for i in 0..sat.instances.len() {
        let inst = sat.instances[i].clone();
        let rm = model.role(&inst.role).expect("instance of a protocol role");
        let mut base = Valuation::new();
        base.bind(Term::Atom(inst.role.clone()), Term::Atom(inst.owner.clone()))
            .expect("role is an agent variable");
        for valuation in sat.extend(i, &base, &rm.components[0]) {
            sat.add(
                Fact {
                    instance: i,
                    length: 0,
                    valuation,
                },
                &mut queue,
            );
        }
    }

    let mut knowledge = initial_state(model, bounds, 1);
    let mut absorbed = 0;
    let mut rounds = 0;
    let mut complete = true;
    'rounds: loop {
        rounds += 1;
        // sends need no knowledge: run them to exhaustion first
        let mut waiting = Vec::new();
        while let Some(i) = queue.pop() {
            let f = &sat.facts[i];
            let rm = sat.role(f);
            if f.length == rm.len() {
                continue;
            }
            if sat.facts.len() > max_facts {
                complete = false;
                break 'rounds;
            }
            if rm.sends_at(f.length) {
                sat.send(i, &mut queue);
            } else {
                waiting.push(i);
            }
        }
        let grew = sat.sent.len() > absorbed;
        if grew {
            let new: Vec<ConcreteTerm> = sat.sent.iter().cloned().collect();
            knowledge.intruder = Arc::new(intruder_close(&knowledge.intruder, new.iter().cloned()));
            let observed: Vec<ConcreteTerm> = knowledge.observed.iter().chain(&new).cloned().collect();
            knowledge.observed = Arc::new(observed_cyphers(&knowledge.intruder, &observed));
            absorbed = sat.sent.len();
        }
        // with more knowledge every waiting receive is retried
        let retry: Vec<usize> = if grew {
            (0..sat.facts.len())
                .filter(|&i| {
                    let f = &sat.facts[i];
                    let rm = sat.role(f);
                    f.length < rm.len() && !rm.sends_at(f.length)
                })
                .collect()
        } else {
            waiting
        };
        if retry.is_empty() && queue.is_empty() {
            break;
        }
        for i in retry {
            if sat.facts.len() > max_facts {
                complete = false;
                break 'rounds;
            }
            sat.receive(i, &knowledge, &mut queue);
        }
        if queue.is_empty() {
            break;
        }
    }

    let mut suspects = Vec::new();
    for t in targets.iter().filter(|_| complete) {
        for f in &sat.facts {
            if sat.instances[f.instance].role != t.viewpoint || f.length == 0 {
                continue;
            }
            let session = sat.session(f);
            if secrecy_violated(model, &knowledge, &session, &t.var) {
                suspects.push(Suspect {
                    target: t.clone(),
                    session,
                });
            }
        }
    }
    Saturation {
        facts: sat.facts.len(),
        sends: sat.sends,
        rounds,
        complete,
        knowledge,
        suspects,
        receives: sat.receives,
    }
}

impl Saturation {
    /// Receives attributed to an honest agent that the over-approximation
    /// cannot show to be preceded by that agent's send.
    ///
    /// A receive of `m` as message `j` from honest `X` is safe when `m`
    /// contains a cypher the intruder can never build and every send that
    /// contains it is `X` sending `m` as message `j`: the intruder can only
    /// have it from that send.
    pub fn unproven_receives(&self) -> Vec<&Event> {
        let intruder = &self.knowledge.intruder;
        // every cypher mapped to the sends carrying it
        let mut carriers: HashMap<&ConcreteTerm, Vec<(&Value, usize, &ConcreteTerm)>> = HashMap::new();
        for (x, j, m) in &self.sends {
            for c in m.encrypted_subterms() {
                let list = carriers.entry(c).or_default();
                if !list.contains(&(x, *j, m)) {
                    list.push((x, *j, m));
                }
            }
        }
        self.receives
            .iter()
            .filter(|e| !e.sender.is_intruder())
            .filter(|e| {
                let proved = e.message.encrypted_subterms().into_iter().any(|c| {
                    let Term::Enc(_, key) = c else { return false };
                    !intruder_key_usable(intruder, key)
                        && carriers.get(c).map_or(true, |list| {
                            list.iter().all(|(x, j, m)| **x == e.sender && *j == e.index && **m == e.message)
                        })
                });
                !proved
            })
            .collect()
    }
}
