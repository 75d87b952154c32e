//! Protocol templates, session projection, realizability and revealed
//! variables.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::deduction::{analyze, first_unsynthesizable, AgentScope, KnowledgeSet};
use crate::term::{Atom, ConcreteTerm, Sort, SymbolicTerm, Term, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageTemplate {
    /// 1-based position in the protocol.
    pub index: usize,
    pub sender: Var,
    pub receiver: Var,
    pub content: SymbolicTerm,
}

impl MessageTemplate {
    pub fn involves(&self, role: &Var) -> bool {
        &self.sender == role || &self.receiver == role
    }

    /// The other party of the message from `role`'s point of view.
    pub fn partner(&self, role: &Var) -> &Var {
        if &self.sender == role {
            &self.receiver
        } else {
            &self.sender
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Secret {
    pub var: Var,
    pub viewpoint: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProtocolTemplate {
    pub name: String,
    /// Agent variables in declaration order.
    pub roles: Vec<Var>,
    pub nonces: Vec<Var>,
    pub keys: Vec<Var>,
    pub constants: Vec<Var>,
    pub messages: Vec<MessageTemplate>,
    /// Explicit initial knowledge; roles absent here get the default.
    pub initial_knowledge: BTreeMap<Var, Vec<SymbolicTerm>>,
    pub intruder_initial: Vec<ConcreteTerm>,
    pub secrets: Vec<Secret>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("message {index}: sender and receiver are both `{role}`")]
    SelfMessage { index: usize, role: String },
    #[error("undeclared identifier `{0}`")]
    UndeclaredVariable(String),
    #[error("message {index}: content is not in canonical form")]
    NotCanonical { index: usize },
    #[error("protocol is not realizable: role {role} cannot build `{missing}` in message {message}")]
    NotRealizable {
        role: String,
        message: usize,
        missing: String,
    },
}

impl ProtocolTemplate {
    pub fn role(&self, name: &str) -> Option<&Var> {
        self.roles.iter().find(|r| r.name() == name)
    }

    pub fn declared(&self) -> impl Iterator<Item = &Var> {
        self.roles
            .iter()
            .chain(&self.nonces)
            .chain(&self.keys)
            .chain(&self.constants)
    }

    pub fn lookup(&self, name: &str) -> Option<&Var> {
        self.declared().find(|v| v.name() == name)
    }

    /// Checks the t-message and declaration invariants.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let declared: BTreeSet<&Var> = self.declared().collect();
        for m in &self.messages {
            if m.sender == m.receiver {
                return Err(ProtocolError::SelfMessage {
                    index: m.index,
                    role: m.sender.to_string(),
                });
            }
            if !m.content.is_canonical() {
                return Err(ProtocolError::NotCanonical { index: m.index });
            }
            for r in [&m.sender, &m.receiver] {
                if !self.roles.contains(r) {
                    return Err(ProtocolError::UnknownRole(r.to_string()));
                }
            }
            for a in m.content.atoms() {
                if !declared.contains(&a) {
                    return Err(ProtocolError::UndeclaredVariable(a.to_string()));
                }
            }
        }
        for (role, terms) in &self.initial_knowledge {
            if !self.roles.contains(role) {
                return Err(ProtocolError::UnknownRole(role.to_string()));
            }
            for a in terms.iter().flat_map(Term::atoms) {
                if !declared.contains(&a) {
                    return Err(ProtocolError::UndeclaredVariable(a.to_string()));
                }
            }
        }
        for s in &self.secrets {
            if !declared.contains(&s.var) {
                return Err(ProtocolError::UndeclaredVariable(s.var.to_string()));
            }
            if let Some(r) = &s.viewpoint {
                if !self.roles.contains(r) {
                    return Err(ProtocolError::UnknownRole(r.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Initial knowledge of `role`. The role always knows its own name.
    /// Without an explicit `init` line it also knows every other role's
    /// name, every role's public key, its own private key and the long-term
    /// symmetric keys it shares in the protocol.
    pub fn initial_knowledge_of(&self, role: &Var) -> Vec<SymbolicTerm> {
        let mut out = vec![Term::Atom(role.clone())];
        if let Some(explicit) = self.initial_knowledge.get(role) {
            out.extend(explicit.iter().cloned());
            return out;
        }
        out.extend(self.roles.iter().filter(|r| *r != role).map(|r| Term::Atom(r.clone())));
        out.extend(self.roles.iter().map(|r| Term::pk(r.clone())));
        out.push(Term::sk(role.clone()));
        for m in &self.messages {
            m.content.visit(&mut |t| {
                if let Term::Shk(x, y) = t {
                    if x == role || y == role {
                        out.push(t.clone());
                    }
                }
            });
        }
        out
    }

    /// Nonce and short-key variables targeted by secrecy goals, or all of
    /// them when no goal is declared.
    pub fn secret_candidates(&self) -> Vec<Var> {
        self.nonces.iter().chain(&self.keys).cloned().collect()
    }
}

/// The subsequence of messages in which `role` is sender or receiver.
pub fn project_session(
    p: &ProtocolTemplate,
    role: &Var,
) -> Result<Vec<MessageTemplate>, ProtocolError> {
    if !p.roles.contains(role) {
        return Err(ProtocolError::UnknownRole(role.to_string()));
    }
    Ok(p.messages.iter().filter(|m| m.involves(role)).cloned().collect())
}

/// Variables (agents, nonces, short-term keys) of a term, including those
/// occurring only as key-constructor arguments.
pub fn term_variables(t: &SymbolicTerm) -> BTreeSet<Var> {
    t.atoms()
        .into_iter()
        .filter(|a| a.sort() != Sort::Constant)
        .collect()
}

/// For each message, the variables it introduces for the first time.
pub fn new_vars(p: &ProtocolTemplate) -> Vec<BTreeSet<Var>> {
    let mut seen = BTreeSet::new();
    p.messages
        .iter()
        .map(|m| {
            let vars: BTreeSet<Var> = term_variables(&m.content)
                .into_iter()
                .filter(|v| !seen.contains(v))
                .collect();
            seen.extend(vars.iter().cloned());
            vars
        })
        .collect()
}

/// Component templates of a knowledge set: every variable of its basic part
/// and every encrypted term of its cryptographic part.
pub fn components(kn: &KnowledgeSet<Var>) -> BTreeSet<SymbolicTerm> {
    let mut out: BTreeSet<SymbolicTerm> = kn
        .basic()
        .iter()
        .flat_map(term_variables)
        .map(Term::Atom)
        .collect();
    out.extend(kn.crypto().iter().cloned());
    out
}

/// Per-role knowledge evolution: `rows[j]` is the knowledge after the j-th
/// message of the role's session (row 0 is the initial knowledge).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleTable {
    pub role: Var,
    /// Protocol indices of the role's session messages.
    pub messages: Vec<usize>,
    pub rows: Vec<KnowledgeSet<Var>>,
}

impl RoleTable {
    /// Basic knowledge gained at protocol message `index`, if the role takes
    /// part in it and its session got that far.
    pub fn delta_at(&self, index: usize) -> Option<BTreeSet<SymbolicTerm>> {
        let j = self.messages.iter().position(|m| *m == index)? + 1;
        let after = self.rows.get(j)?;
        let before = &self.rows[j - 1];
        Some(after.basic().difference(before.basic()).cloned().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Realizability {
    Realizable,
    Failure {
        role: String,
        message: usize,
        missing: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RealizabilityReport {
    pub verdict: Realizability,
    pub tables: Vec<RoleTable>,
}

impl RealizabilityReport {
    pub fn is_realizable(&self) -> bool {
        self.verdict == Realizability::Realizable
    }

    pub fn table(&self, role: &Var) -> Option<&RoleTable> {
        self.tables.iter().find(|t| &t.role == role)
    }

    pub fn into_result(self) -> Result<Vec<RoleTable>, ProtocolError> {
        match self.verdict {
            Realizability::Realizable => Ok(self.tables),
            Realizability::Failure {
                role,
                message,
                missing,
            } => Err(ProtocolError::NotRealizable {
                role,
                message,
                missing,
            }),
        }
    }
}

/// Simulates every role's session template, deciding whether each send can
/// be synthesized and recording the knowledge after every step.
pub fn check_realizable(p: &ProtocolTemplate) -> RealizabilityReport {
    let fresh = new_vars(p);
    let mut failures = Vec::new();
    let mut tables = Vec::new();
    for role in &p.roles {
        let session: Vec<&MessageTemplate> = p.messages.iter().filter(|m| m.involves(role)).collect();
        let mut kn = analyze(role, AgentScope::Known, p.initial_knowledge_of(role));
        let mut rows = vec![kn.clone()];
        let mut done = Vec::new();
        for m in session {
            if &m.sender == role {
                let with_new = analyze(
                    role,
                    AgentScope::Known,
                    kn.iter()
                        .cloned()
                        .chain(fresh[m.index - 1].iter().cloned().map(Term::Atom)),
                );
                if let Some(missing) = first_unsynthesizable(role, &with_new, &m.content) {
                    failures.push((m.index, role.clone(), missing));
                    break;
                }
            }
            // the partner is analysed together with the content so that rows
            // stay analysis fixpoints; a sender also keeps the values it
            // generated, even when it cannot open what it sent
            let generated: Vec<SymbolicTerm> = if &m.sender == role {
                fresh[m.index - 1].iter().cloned().map(Term::Atom).collect()
            } else {
                Vec::new()
            };
            kn = analyze(
                role,
                AgentScope::Known,
                kn.iter()
                    .cloned()
                    .chain([Term::Atom(m.partner(role).clone()), m.content.clone()])
                    .chain(generated),
            );
            rows.push(kn.clone());
            done.push(m.index);
        }
        tables.push(RoleTable {
            role: role.clone(),
            messages: done,
            rows,
        });
    }
    let verdict = match failures.into_iter().min_by_key(|(i, _, _)| *i) {
        None => Realizability::Realizable,
        Some((message, role, missing)) => Realizability::Failure {
            role: role.to_string(),
            message,
            missing: missing.to_string(),
        },
    };
    RealizabilityReport { verdict, tables }
}

/// Name of the external observer used for revealed-variable analysis; it is
/// not a valid identifier in spec files, so it never collides with a role.
const OBSERVER: &str = "#observer";

/// Splits the nonce and short-key variables into those an external
/// observer learns from the message contents and those it does not.
pub fn revealed_vars(p: &ProtocolTemplate) -> (BTreeSet<Var>, BTreeSet<Var>) {
    let observer = Var::agent(OBSERVER);
    let kn = analyze(
        &observer,
        AgentScope::All,
        p.messages.iter().map(|m| m.content.clone()),
    );
    p.nonces
        .iter()
        .chain(&p.keys)
        .cloned()
        .partition(|v| kn.knows_atom(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::parse_spec;
    use crate::corpus;

    fn tmn() -> ProtocolTemplate {
        parse_spec(corpus::TMN).unwrap()
    }

    fn atoms(names: &[&str], p: &ProtocolTemplate) -> BTreeSet<SymbolicTerm> {
        names
            .iter()
            .map(|n| Term::Atom(p.lookup(n).unwrap().clone()))
            .collect()
    }

    #[test]
    fn session_projection() {
        let p = tmn();
        let s = project_session(&p, p.role("S").unwrap()).unwrap();
        assert_eq!(s.len(), 4);
        let a: Vec<usize> = project_session(&p, p.role("A").unwrap())
            .unwrap()
            .iter()
            .map(|m| m.index)
            .collect();
        assert_eq!(a, vec![1, 4]);
        assert!(matches!(
            project_session(&p, &Var::agent("Z")),
            Err(ProtocolError::UnknownRole(_))
        ));
    }

    #[test]
    fn role_without_messages_has_empty_session() {
        let mut p = tmn();
        p.roles.push(Var::agent("C"));
        assert!(project_session(&p, &Var::agent("C")).unwrap().is_empty());
    }

    #[test]
    fn tmn_new_vars() {
        let p = tmn();
        let nv = new_vars(&p);
        let names = |s: &BTreeSet<Var>| s.iter().map(|v| v.name().to_string()).collect::<Vec<_>>();
        assert_eq!(names(&nv[0]), vec!["B", "Ka", "S"]);
        assert_eq!(names(&nv[1]), vec!["A"]);
        assert_eq!(names(&nv[2]), vec!["Kb"]);
        assert!(nv[3].is_empty());
    }

    #[test]
    fn repeated_message_introduces_nothing() {
        let mut p = tmn();
        let first = p.messages[0].clone();
        p.messages = vec![first.clone(), MessageTemplate { index: 2, ..first }];
        let nv = new_vars(&p);
        assert!(!nv[0].is_empty());
        assert!(nv[1].is_empty());
    }

    #[test]
    fn tmn_knowledge_table() {
        let p = tmn();
        let report = check_realizable(&p);
        assert!(report.is_realizable());
        let a = report.table(p.role("A").unwrap()).unwrap();
        assert_eq!(a.delta_at(1).unwrap(), atoms(&["B", "Ka"], &p));
        assert_eq!(a.delta_at(4).unwrap(), atoms(&["Kb"], &p));
        let s = report.table(p.role("S").unwrap()).unwrap();
        assert_eq!(s.delta_at(1).unwrap(), atoms(&["A", "B", "Ka"], &p));
        let b = report.table(p.role("B").unwrap()).unwrap();
        assert_eq!(b.delta_at(2).unwrap(), atoms(&["A"], &p));
        assert_eq!(b.delta_at(3).unwrap(), atoms(&["Kb"], &p));
        for t in &report.tables {
            for w in t.rows.windows(2) {
                assert!(w[0].basic().is_subset(w[1].basic()));
            }
        }
    }

    #[test]
    fn unusable_key_fails_realizability() {
        let p = parse_spec(
            "protocol Bad\nroles A B C\nnonces N\n1. A -> B : {N}shk(B,C)\n",
        )
        .unwrap();
        let report = check_realizable(&p);
        match report.verdict {
            Realizability::Failure { role, message, missing } => {
                assert_eq!(role, "A");
                assert_eq!(message, 1);
                assert_eq!(missing, "{N}shk(B,C)");
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn tmn_revealed() {
        let p = tmn();
        let (revealed, unrevealed) = revealed_vars(&p);
        assert!(revealed.is_empty());
        assert_eq!(unrevealed.len(), 2);
    }

    #[test]
    fn bare_and_signed_nonces_are_revealed() {
        let p = parse_spec("protocol P\nroles A B\nnonces N\n1. A -> B : N\n").unwrap();
        assert_eq!(revealed_vars(&p).0.len(), 1);
        let p = parse_spec("protocol P\nroles A B\nnonces N\n1. A -> B : {N}sk(A)\n").unwrap();
        assert_eq!(revealed_vars(&p).0.len(), 1);
    }

    #[test]
    fn revealed_is_order_independent() {
        let p = tmn();
        let mut q = p.clone();
        q.messages.reverse();
        assert_eq!(revealed_vars(&p), revealed_vars(&q));
    }
}
