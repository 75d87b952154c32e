//! Term generators and brute-force oracles for the deduction closures.

use std::collections::BTreeSet;

use dove::deduction::KnowledgeSet;
use dove::term::{Atom, Sort, Term, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub type T = Term<Var>;

pub fn ag(n: &str) -> T {
    Term::Atom(Var::agent(n))
}

pub fn owner() -> Var {
    Var::agent("A")
}

pub fn leaf() -> impl Strategy<Value = T> {
    prop_oneof![
        prop::sample::select(vec!["A", "B", "C"]).prop_map(ag),
        prop::sample::select(vec!["n1", "n2"]).prop_map(|n| Term::Atom(Var::nonce(n))),
        prop::sample::select(vec!["k1", "k2"]).prop_map(|n| Term::Atom(Var::key(n))),
        Just(Term::Atom(Var::constant("c"))),
    ]
}

pub fn key() -> impl Strategy<Value = T> {
    let agent = prop::sample::select(vec!["A", "B", "C"]).prop_map(Var::agent);
    prop_oneof![
        prop::sample::select(vec!["k1", "k2"]).prop_map(|n| Term::Atom(Var::key(n))),
        agent.clone().prop_map(Term::pk),
        agent.clone().prop_map(Term::sk),
        (agent.clone(), agent).prop_map(|(a, b)| Term::shk(a, b)),
    ]
}

pub fn term() -> impl Strategy<Value = T> {
    let base = prop_oneof![3 => leaf(), 1 => key()];
    base.prop_recursive(3, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 2..=3).prop_map(Term::tuple),
            (inner, key()).prop_map(|(b, k)| Term::enc(b, k)),
        ]
    })
}

pub fn depth(t: &T) -> usize {
    match t {
        Term::Tuple(items) => 1 + items.iter().map(depth).max().unwrap_or(0),
        Term::Enc(b, _) => 1 + depth(b),
        _ => 0,
    }
}

/// Whether the owner may open an encryption under `k` while holding `set`.
pub fn opens(set: &BTreeSet<T>, k: &T) -> bool {
    let a = owner();
    let known = |x: &Var| *x == a || set.contains(&Term::Atom(x.clone()));
    match k {
        Term::Atom(v) if v.sort() == Sort::ShortKey => set.contains(k),
        Term::Atom(_) => true,
        Term::Pk(x) => *x == a,
        Term::Sk(x) => known(x),
        Term::Shk(x, y) => {
            set.contains(k) || (*x == a && known(y)) || (*y == a && known(x))
        }
        _ => false,
    }
}

/// Applies single rewrites in an order drawn from `rng` until none applies.
pub fn rewrite_fixpoint(terms: &[T], rng: &mut ChaCha8Rng) -> BTreeSet<T> {
    let mut set: BTreeSet<T> = terms.iter().cloned().collect();
    loop {
        let mut redexes: Vec<T> = set
            .iter()
            .filter(|t| match t {
                Term::Tuple(_) => true,
                Term::Enc(_, k) => opens(&set, k),
                _ => false,
            })
            .cloned()
            .collect();
        if redexes.is_empty() {
            return set;
        }
        redexes.shuffle(rng);
        let t = redexes.swap_remove(0);
        set.remove(&t);
        match t {
            Term::Tuple(items) => set.extend(items),
            Term::Enc(b, _) => {
                set.insert(*b);
            }
            _ => unreachable!(),
        }
    }
}

/// Synth membership by bottom-up evaluation over the target's subterms,
/// smallest first.
pub fn synth_oracle(kn: &KnowledgeSet<Var>, target: &T) -> bool {
    let a = owner();
    let mut subs: Vec<T> = target.subterms().into_iter().collect();
    subs.sort_by_key(depth);
    let mut ok: BTreeSet<T> = BTreeSet::new();
    for s in subs {
        let good = kn.contains(&s)
            || matches!(&s, Term::Atom(v) if v.name() == "c")
            || match &s {
                Term::Tuple(items) => items.iter().all(|i| ok.contains(i)),
                Term::Enc(b, k) => {
                    ok.contains(&**b)
                        && match &**k {
                            Term::Pk(_) => true,
                            Term::Sk(x) => *x == a,
                            Term::Shk(x, y) => *x == a || *y == a,
                            Term::Atom(v) if v.name() == "c" => true,
                            other => kn.basic().contains(other),
                        }
                }
                _ => false,
            };
        if good {
            ok.insert(s);
        }
    }
    ok.contains(target)
}

/// Every item an owner ends up holding, found by naive repeated decryption.
pub fn extractable(terms: &[T]) -> BTreeSet<T> {
    let mut seen: BTreeSet<T> = BTreeSet::new();
    for t in terms {
        seen.extend(t.elements().iter().cloned());
    }
    loop {
        let before = seen.len();
        let opened: Vec<T> = seen
            .iter()
            .filter_map(|t| match t {
                Term::Enc(b, k) if opens(&seen, k) => Some((**b).clone()),
                _ => None,
            })
            .collect();
        for b in opened {
            seen.extend(b.elements().iter().cloned());
        }
        if seen.len() == before {
            // an opened cypher is replaced by its contents
            let opened: BTreeSet<T> = seen
                .iter()
                .filter(|t| matches!(t, Term::Enc(_, k) if opens(&seen, k)))
                .cloned()
                .collect();
            return &seen - &opened;
        }
    }
}
