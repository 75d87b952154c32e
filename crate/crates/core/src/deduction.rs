//! Synthesis and analysis closures.
//!
//! The same code serves honest agents reasoning over symbolic terms (owner is
//! a role variable) and the intruder reasoning over concrete terms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::term::{Atom, ConcreteTerm, Sort, Term, Value};

/// Which agent identities count as known when a decryption rule needs one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentScope {
    /// Only the owner and agents present in the knowledge.
    Known,
    /// Every agent identity (the intruder, external observers).
    All,
}

/// An undecomposable set of terms split into basic and cryptographic parts.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KnowledgeSet<A> {
    basic: BTreeSet<Term<A>>,
    crypto: BTreeSet<Term<A>>,
}

impl<A: Atom> Default for KnowledgeSet<A> {
    fn default() -> Self {
        KnowledgeSet {
            basic: BTreeSet::new(),
            crypto: BTreeSet::new(),
        }
    }
}

impl<A: Atom> KnowledgeSet<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn basic(&self) -> &BTreeSet<Term<A>> {
        &self.basic
    }

    pub fn crypto(&self) -> &BTreeSet<Term<A>> {
        &self.crypto
    }

    pub fn contains(&self, t: &Term<A>) -> bool {
        self.basic.contains(t) || self.crypto.contains(t)
    }

    pub fn is_empty(&self) -> bool {
        self.basic.is_empty() && self.crypto.is_empty()
    }

    pub fn len(&self) -> usize {
        self.basic.len() + self.crypto.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Term<A>> {
        self.basic.iter().chain(self.crypto.iter())
    }

    /// Basic and cryptographic parts as one set.
    pub fn flatten(&self) -> BTreeSet<Term<A>> {
        self.iter().cloned().collect()
    }

    pub fn knows_atom(&self, a: &A) -> bool {
        self.basic.contains(&Term::Atom(a.clone()))
    }
}

impl<A: Atom> fmt::Display for KnowledgeSet<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "basic {{{}}} crypto {{{}}}", join(&self.basic), join(&self.crypto))
    }
}

impl<A: Atom> fmt::Debug for KnowledgeSet<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub(crate) fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn agent_known<A: Atom>(owner: &A, scope: AgentScope, basic: &BTreeSet<Term<A>>, x: &A) -> bool {
    scope == AgentScope::All || x == owner || basic.contains(&Term::Atom(x.clone()))
}

/// Whether `owner` holding `basic` may strip encryption under `key`.
pub fn can_decrypt<A: Atom>(
    owner: &A,
    scope: AgentScope,
    basic: &BTreeSet<Term<A>>,
    key: &Term<A>,
) -> bool {
    match key {
        Term::Atom(k) => match k.sort() {
            Sort::ShortKey => basic.contains(key),
            Sort::Constant => true,
            _ => false,
        },
        Term::Pk(x) => x == owner,
        Term::Sk(x) => agent_known(owner, scope, basic, x),
        Term::Shk(x, y) => {
            basic.contains(key)
                || (x == owner && agent_known(owner, scope, basic, y))
                || (y == owner && agent_known(owner, scope, basic, x))
        }
        _ => false,
    }
}

/// The unique analysis fixpoint of `terms` for `owner`.
pub fn analyze<A: Atom>(
    owner: &A,
    scope: AgentScope,
    terms: impl IntoIterator<Item = Term<A>>,
) -> KnowledgeSet<A> {
    let mut basic = BTreeSet::new();
    let mut pending: BTreeSet<Term<A>> = BTreeSet::new();
    let mut work: Vec<Term<A>> = terms.into_iter().collect();
    loop {
        while let Some(t) = work.pop() {
            match t {
                Term::Tuple(items) => work.extend(items),
                enc @ Term::Enc(..) => {
                    pending.insert(enc);
                }
                other => {
                    basic.insert(other);
                }
            }
        }
        let (ready, rest): (BTreeSet<_>, BTreeSet<_>) = pending.into_iter().partition(|e| match e {
            Term::Enc(_, key) => can_decrypt(owner, scope, &basic, key),
            _ => unreachable!("only encryptions are pending"),
        });
        pending = rest;
        if ready.is_empty() {
            break;
        }
        for e in ready {
            if let Term::Enc(body, _) = e {
                work.push(*body);
            }
        }
    }
    KnowledgeSet {
        basic,
        crypto: pending,
    }
}

/// Whether an honest `owner` may encrypt under `key` given knowledge `kn`.
pub fn honest_key_usable<A: Atom>(owner: &A, kn: &KnowledgeSet<A>, key: &Term<A>) -> bool {
    match key {
        Term::Shk(x, y) => x == owner || y == owner,
        Term::Sk(x) => x == owner,
        Term::Pk(_) => true,
        Term::Atom(k) => match k.sort() {
            Sort::ShortKey => kn.basic.contains(key),
            Sort::Constant => true,
            _ => false,
        },
        _ => false,
    }
}

/// Membership of `target` in the owner's synthesis closure of `kn`.
pub fn can_synthesize<A: Atom>(owner: &A, kn: &KnowledgeSet<A>, target: &Term<A>) -> bool {
    first_unsynthesizable(owner, kn, target).is_none()
}

/// The smallest subterm of `target` that blocks synthesis, if any.
pub fn first_unsynthesizable<A: Atom>(
    owner: &A,
    kn: &KnowledgeSet<A>,
    target: &Term<A>,
) -> Option<Term<A>> {
    if kn.contains(target) {
        return None;
    }
    match target {
        Term::Tuple(items) => items.iter().find_map(|t| first_unsynthesizable(owner, kn, t)),
        Term::Enc(body, key) => {
            if let Some(inner) = first_unsynthesizable(owner, kn, body) {
                Some(inner)
            } else if honest_key_usable(owner, kn, key) {
                None
            } else {
                Some(target.clone())
            }
        }
        Term::Atom(a) if a.sort() == Sort::Constant => None,
        other => Some(other.clone()),
    }
}

/// One decryption in a derivation: opening `cypher` (with `via` as the
/// auxiliary learned item, if any) yields `yields`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivationStep<A: Atom> {
    pub cypher: Term<A>,
    pub via: Option<Term<A>>,
    pub yields: Term<A>,
}

struct Learned<A: Atom> {
    cost: BTreeMap<Term<A>, usize>,
    // item -> (cypher it came out of, auxiliary item needed for the key)
    source: BTreeMap<Term<A>, (Term<A>, Option<Term<A>>)>,
}

fn learn<A: Atom>(owner: &A, scope: AgentScope, terms: &[Term<A>]) -> Learned<A> {
    let mut cost: BTreeMap<Term<A>, usize> = BTreeMap::new();
    let mut source = BTreeMap::new();
    for t in terms {
        for e in t.elements() {
            cost.insert(e.clone(), 0);
        }
    }
    let agent_cost = |cost: &BTreeMap<Term<A>, usize>, x: &A| -> Option<(usize, Option<Term<A>>)> {
        if scope == AgentScope::All || x == owner {
            Some((0, None))
        } else {
            let t = Term::Atom(x.clone());
            cost.get(&t).map(|c| (*c, Some(t)))
        }
    };
    loop {
        let mut changed = false;
        let encs: Vec<(Term<A>, usize)> = cost
            .iter()
            .filter(|(t, _)| t.is_enc())
            .map(|(t, c)| (t.clone(), *c))
            .collect();
        for (enc, p) in encs {
            let Term::Enc(body, key) = &enc else { continue };
            let aux: Option<(usize, Option<Term<A>>)> = match &**key {
                Term::Atom(k) if k.sort() == Sort::ShortKey => {
                    cost.get(key).map(|q| (*q, Some((**key).clone())))
                }
                Term::Atom(k) if k.sort() == Sort::Constant => Some((0, None)),
                Term::Pk(x) if x == owner => Some((0, None)),
                Term::Sk(x) => agent_cost(&cost, x),
                Term::Shk(x, y) => {
                    let direct = cost.get(key).map(|q| (*q, Some((**key).clone())));
                    let via_x = if x == owner { agent_cost(&cost, y) } else { None };
                    let via_y = if y == owner { agent_cost(&cost, x) } else { None };
                    [direct, via_x, via_y].into_iter().flatten().min_by_key(|(q, _)| *q)
                }
                _ => None,
            };
            let Some((q, via)) = aux else { continue };
            let c = p + q + 1;
            for e in body.elements() {
                if cost.get(e).map_or(true, |old| c < *old) {
                    cost.insert(e.clone(), c);
                    source.insert(e.clone(), (enc.clone(), via.clone()));
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Learned { cost, source }
}

/// Minimal number of decryptions `owner` needs to learn `target` from
/// `terms`; `None` when `target` is not in the analysis fixpoint.
pub fn steps_to_learn<A: Atom>(
    owner: &A,
    scope: AgentScope,
    terms: &[Term<A>],
    target: &Term<A>,
) -> Option<usize> {
    if !analyze(owner, scope, terms.iter().cloned()).contains(target) {
        return None;
    }
    learn(owner, scope, terms).cost.get(target).copied()
}

/// A minimal decryption chain leading to `target`, in execution order.
pub fn derivation<A: Atom>(
    owner: &A,
    scope: AgentScope,
    terms: &[Term<A>],
    target: &Term<A>,
) -> Option<Vec<DerivationStep<A>>> {
    if !analyze(owner, scope, terms.iter().cloned()).contains(target) {
        return None;
    }
    let learned = learn(owner, scope, terms);
    learned.cost.get(target)?;
    let mut steps = Vec::new();
    let mut seen = BTreeSet::new();
    collect_steps(&learned, target, &mut steps, &mut seen);
    Some(steps)
}

fn collect_steps<A: Atom>(
    learned: &Learned<A>,
    item: &Term<A>,
    out: &mut Vec<DerivationStep<A>>,
    seen: &mut BTreeSet<Term<A>>,
) {
    if !seen.insert(item.clone()) {
        return;
    }
    if let Some((cypher, via)) = learned.source.get(item) {
        collect_steps(learned, cypher, out, seen);
        if let Some(v) = via {
            collect_steps(learned, v, out, seen);
        }
        out.push(DerivationStep {
            cypher: cypher.clone(),
            via: via.clone(),
            yields: item.clone(),
        });
    }
}

/// Closes the intruder's knowledge over newly observed terms.
pub fn intruder_close(
    intr: &KnowledgeSet<Value>,
    new: impl IntoIterator<Item = ConcreteTerm>,
) -> KnowledgeSet<Value> {
    let mut new = new.into_iter().peekable();
    if new.peek().is_none() {
        return intr.clone();
    }
    analyze(
        &Value::intruder(),
        AgentScope::All,
        intr.iter().cloned().chain(new),
    )
}

/// Whether the intruder can derive `key` and encrypt with it.
pub fn intruder_key_usable(kn: &KnowledgeSet<Value>, key: &ConcreteTerm) -> bool {
    key.is_key() && intruder_can_derive(kn, key)
}

/// Membership of `target` in the intruder's synthesis closure. Agent names,
/// constants, every public key, the intruder's own private key and every
/// long-term key shared with the intruder are always available.
pub fn intruder_can_derive(kn: &KnowledgeSet<Value>, target: &ConcreteTerm) -> bool {
    intruder_can_derive_with(kn, &BTreeSet::new(), target)
}

/// Like [`intruder_can_derive`], but cyphers in `observed` may also be
/// replayed verbatim, including those the intruder managed to open.
pub fn intruder_can_derive_with(
    kn: &KnowledgeSet<Value>,
    observed: &BTreeSet<ConcreteTerm>,
    target: &ConcreteTerm,
) -> bool {
    if kn.contains(target) {
        return true;
    }
    match target {
        Term::Atom(Value::Agent(_)) | Term::Atom(Value::Const(_)) => true,
        Term::Atom(_) => false,
        Term::Pk(_) => true,
        Term::Sk(a) => a.is_intruder(),
        Term::Shk(a, b) => a.is_intruder() || b.is_intruder(),
        Term::Tuple(items) => items.iter().all(|t| intruder_can_derive_with(kn, observed, t)),
        Term::Enc(body, key) => {
            observed.contains(target)
                || (intruder_key_usable(kn, key) && intruder_can_derive_with(kn, observed, body))
        }
    }
}

/// Every cypher the intruder has seen whole while analysing `terms`, given
/// the resulting fixpoint `kn`: undecryptable ones and those it opened.
pub fn observed_cyphers<'a>(
    kn: &KnowledgeSet<Value>,
    terms: impl IntoIterator<Item = &'a ConcreteTerm>,
) -> BTreeSet<ConcreteTerm> {
    let intruder = Value::intruder();
    let mut out = BTreeSet::new();
    let mut work: Vec<&ConcreteTerm> = terms.into_iter().collect();
    while let Some(t) = work.pop() {
        match t {
            Term::Tuple(items) => work.extend(items),
            Term::Enc(body, key) => {
                if out.insert(t.clone()) && can_decrypt(&intruder, AgentScope::All, kn.basic(), key) {
                    work.push(body);
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::{Fresh, Var};

    fn v(n: &str) -> Term<Var> {
        Term::Atom(Var::agent(n))
    }
    fn key(n: &str) -> Term<Var> {
        Term::Atom(Var::key(n))
    }
    fn nonce(n: &str) -> Term<Var> {
        Term::Atom(Var::nonce(n))
    }

    #[test]
    fn decrypts_shared_key_when_partner_known() {
        let a = Var::agent("A");
        let t = Term::tuple([v("B"), Term::enc(nonce("n"), Term::shk(a.clone(), Var::agent("B")))]);
        let kn = analyze(&a, AgentScope::Known, [t]);
        assert_eq!(kn.basic(), &BTreeSet::from([v("B"), nonce("n")]));
        assert!(kn.crypto().is_empty());
    }

    #[test]
    fn empty_input_gives_empty_knowledge() {
        let kn = analyze(&Var::agent("A"), AgentScope::Known, Vec::<Term<Var>>::new());
        assert!(kn.is_empty());
    }

    #[test]
    fn tmn_step_two_for_b() {
        let b = Var::agent("B");
        let s = Var::agent("S");
        let kn = analyze(
            &b,
            AgentScope::Known,
            [Term::tuple([v("B"), v("A")]), v("S"), Term::pk(s.clone())],
        );
        assert_eq!(
            kn.basic(),
            &BTreeSet::from([v("A"), v("B"), v("S"), Term::pk(s)])
        );
    }

    #[test]
    fn keeps_undecryptable_cyphers() {
        let a = Var::agent("A");
        let c = Term::enc(key("Ka"), Term::pk(Var::agent("S")));
        let kn = analyze(&a, AgentScope::Known, [Term::tuple([v("B"), c.clone()])]);
        assert_eq!(kn.crypto(), &BTreeSet::from([c]));
        assert_eq!(kn.basic(), &BTreeSet::from([v("B")]));
    }

    #[test]
    fn own_public_key_and_short_key_chain() {
        let a = Var::agent("A");
        let t1 = Term::enc(key("K"), Term::pk(a.clone()));
        let t2 = Term::enc(nonce("x"), key("K"));
        let kn = analyze(&a, AgentScope::Known, [t2.clone(), t1.clone()]);
        assert_eq!(kn.basic(), &BTreeSet::from([key("K"), nonce("x")]));
        assert_eq!(steps_to_learn(&a, AgentScope::Known, &[t1.clone(), t2.clone()], &nonce("x")), Some(2));
        let chain = derivation(&a, AgentScope::Known, &[t1, t2], &nonce("x")).unwrap();
        assert_eq!(chain.len(), 2);
        assert_eq!(chain[1].yields, nonce("x"));
    }

    #[test]
    fn steps_zero_and_one() {
        let a = Var::agent("A");
        let tau = nonce("tau");
        let t = Term::tuple([v("x"), tau.clone(), v("y")]);
        assert_eq!(steps_to_learn(&a, AgentScope::Known, &[t], &tau), Some(0));
        let t = Term::enc(tau.clone(), Term::pk(a.clone()));
        assert_eq!(steps_to_learn(&a, AgentScope::Known, &[t], &tau), Some(1));
        let t = Term::enc(tau.clone(), Term::pk(Var::agent("S")));
        assert_eq!(steps_to_learn(&a, AgentScope::Known, &[t], &tau), None);
    }

    #[test]
    fn synthesis_examples() {
        let a = Var::agent("A");
        let s = Var::agent("S");
        let kn = analyze(&a, AgentScope::Known, [v("B"), key("Ka"), v("S"), Term::pk(s.clone())]);
        let m1 = Term::tuple([v("B"), Term::enc(key("Ka"), Term::pk(s))]);
        assert!(can_synthesize(&a, &kn, &m1));

        let kn = analyze(&a, AgentScope::Known, [v("B")]);
        assert!(!can_synthesize(&a, &kn, &Term::enc(v("B"), Term::sk(Var::agent("C")))));
        assert!(can_synthesize(&a, &kn, &Term::enc(v("B"), Term::sk(a.clone()))));

        let kn = analyze(&a, AgentScope::Known, [v("B"), key("Ka")]);
        assert!(can_synthesize(&a, &kn, &Term::enc(v("B"), key("Ka"))));
        let bad = Term::enc(v("B"), key("Kb"));
        assert!(!can_synthesize(&a, &kn, &bad));
        assert_eq!(first_unsynthesizable(&a, &kn, &bad), Some(bad));
    }

    fn kv(id: u32) -> ConcreteTerm {
        Term::Atom(Value::Key(Fresh::honest(id)))
    }

    #[test]
    fn intruder_closure_examples() {
        let s = Value::agent("s");
        let c = Term::enc(kv(1), Term::pk(s));
        let m = Term::tuple([Term::Atom(Value::agent("b")), c.clone()]);
        let kn = intruder_close(&KnowledgeSet::new(), [m]);
        assert_eq!(kn.basic(), &BTreeSet::from([Term::Atom(Value::agent("b"))]));
        assert_eq!(kn.crypto(), &BTreeSet::from([c]));

        let start = intruder_close(&KnowledgeSet::new(), [kv(1)]);
        let kn = intruder_close(&start, [Term::enc(kv(2), kv(1))]);
        assert_eq!(kn.basic(), &BTreeSet::from([kv(1), kv(2)]));

        assert_eq!(intruder_close(&kn, []), kn);
    }

    #[test]
    fn intruder_synthesis_examples() {
        let ki = Term::Atom(Value::Key(Fresh::intruder(1)));
        let kn = intruder_close(&KnowledgeSet::new(), [ki.clone()]);
        let target = Term::tuple([
            Term::Atom(Value::agent("b")),
            Term::enc(ki, Term::pk(Value::agent("s"))),
        ]);
        assert!(intruder_can_derive(&kn, &target));

        let empty = KnowledgeSet::new();
        assert!(!intruder_can_derive(&empty, &Term::Sk(Value::agent("a"))));
        let signed = Term::enc(
            Term::Atom(Value::agent("a")),
            Term::shk(Value::agent("a"), Value::intruder()),
        );
        assert!(intruder_can_derive(&empty, &signed));
        assert!(!intruder_can_derive(&empty, &Term::enc(kv(3), kv(4))));
    }
}
