use std::collections::BTreeSet;

use dove::deduction::{
    analyze, can_synthesize, intruder_can_derive, intruder_close, steps_to_learn, AgentScope,
    KnowledgeSet,
};
use dove::term::{Atom, Fresh, Sort, Term, Value, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::terms::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn analyze_matches_rewriting_in_any_order(
        terms in prop::collection::vec(term(), 0..=6),
        seed in any::<u64>(),
    ) {
        let kn = analyze(&owner(), AgentScope::Known, terms.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            let fix = rewrite_fixpoint(&terms, &mut rng);
            prop_assert_eq!(&fix, &kn.flatten());
        }
        prop_assert!(kn.basic().is_disjoint(kn.crypto()));
        prop_assert!(kn.crypto().iter().all(|t| t.is_enc()));
        // undecomposable: analysing the result again changes nothing
        prop_assert_eq!(analyze(&owner(), AgentScope::Known, kn.flatten()), kn);
    }

    #[test]
    fn synthesis_matches_bottom_up_enumeration(
        terms in prop::collection::vec(term(), 0..=6),
        target in term(),
    ) {
        let kn = analyze(&owner(), AgentScope::Known, terms);
        prop_assert_eq!(can_synthesize(&owner(), &kn, &target), synth_oracle(&kn, &target));
        for t in kn.iter() {
            prop_assert!(can_synthesize(&owner(), &kn, t));
        }
    }

    #[test]
    fn analysis_and_synthesis_are_monotone(
        small in prop::collection::vec(term(), 0..=4),
        extra in prop::collection::vec(term(), 0..=2),
        target in term(),
    ) {
        let big: Vec<T> = small.iter().chain(&extra).cloned().collect();
        let k1 = analyze(&owner(), AgentScope::Known, small);
        let k2 = analyze(&owner(), AgentScope::Known, big);
        for t in k1.basic() {
            prop_assert!(k2.basic().contains(t));
        }
        // a cypher of the smaller set may be opened by the larger one, but it
        // never adds anything new
        let merged = analyze(&owner(), AgentScope::Known, k2.iter().chain(k1.iter()).cloned());
        prop_assert_eq!(&merged, &k2);
        // cyphers replayed whole are the one exception, see below
        let replays = target.subterms().iter().any(|t| k1.crypto().contains(t));
        if can_synthesize(&owner(), &k1, &target) && !replays {
            prop_assert!(can_synthesize(&owner(), &k2, &target));
        }
    }

    #[test]
    fn steps_to_learn_defined_exactly_on_extractable_items(
        terms in prop::collection::vec(term(), 1..=5),
        target in term(),
    ) {
        let kn = analyze(&owner(), AgentScope::Known, terms.clone());
        let steps = steps_to_learn(&owner(), AgentScope::Known, &terms, &target);
        prop_assert_eq!(steps.is_some(), kn.contains(&target));
        prop_assert_eq!(steps.is_some(), extractable(&terms).contains(&target));
        if steps == Some(0) {
            prop_assert!(terms.iter().any(|t| t.elements().contains(&target)));
        }
    }
}

#[test]
fn shared_key_decryption_needs_the_partner() {
    let msg = Term::tuple([ag("B"), Term::enc(Term::Atom(Var::nonce("n")), Term::shk(owner(), Var::agent("B")))]);
    let kn = analyze(&owner(), AgentScope::Known, [msg]);
    let expect: BTreeSet<T> = [ag("B"), Term::Atom(Var::nonce("n"))].into_iter().collect();
    assert_eq!(kn.basic(), &expect);
    assert!(kn.crypto().is_empty());
    assert!(analyze(&owner(), AgentScope::Known, Vec::<T>::new()).is_empty());
}

#[test]
fn opened_signature_can_no_longer_be_replayed() {
    let a = owner();
    let sig = Term::enc(Term::Atom(Var::nonce("n1")), Term::sk(Var::agent("B")));
    let k1 = analyze(&a, AgentScope::Known, [sig.clone()]);
    let k2 = analyze(&a, AgentScope::Known, [sig.clone(), ag("B")]);
    assert!(can_synthesize(&a, &k1, &sig));
    assert!(!can_synthesize(&a, &k2, &sig));
}

#[test]
fn tmn_step_two_knowledge_of_b() {
    let b = Var::agent("B");
    let kn = analyze(
        &b,
        AgentScope::Known,
        [Term::tuple([ag("B"), ag("A")]), ag("S"), Term::pk(Var::agent("S"))],
    );
    let expect: BTreeSet<T> = [ag("A"), ag("B"), ag("S"), Term::pk(Var::agent("S"))].into_iter().collect();
    assert_eq!(kn.basic(), &expect);
}

#[test]
fn synthesis_examples() {
    let a = owner();
    let ka = Term::Atom(Var::key("Ka"));
    let kn = analyze(&a, AgentScope::Known, [ag("B"), ka.clone(), ag("S"), Term::pk(Var::agent("S"))]);
    let m1 = Term::tuple([ag("B"), Term::enc(ka.clone(), Term::pk(Var::agent("S")))]);
    assert!(can_synthesize(&a, &kn, &m1));

    let kn = analyze(&a, AgentScope::Known, [ag("B")]);
    assert!(!can_synthesize(&a, &kn, &Term::enc(ag("B"), Term::sk(Var::agent("C")))));

    let kn = analyze(&a, AgentScope::Known, [ag("B"), ka.clone()]);
    assert!(can_synthesize(&a, &kn, &Term::enc(ag("B"), ka)));
    assert!(!can_synthesize(&a, &kn, &Term::enc(ag("B"), Term::Atom(Var::key("Kb")))));
}

#[test]
fn steps_to_learn_examples() {
    let tau = Term::Atom(Var::nonce("t"));
    let a = owner();
    let terms = [Term::tuple([ag("X"), tau.clone(), ag("Y")])];
    assert_eq!(steps_to_learn(&a, AgentScope::Known, &terms, &tau), Some(0));
    let terms = [Term::enc(tau.clone(), Term::pk(a.clone()))];
    assert_eq!(steps_to_learn(&a, AgentScope::Known, &terms, &tau), Some(1));
    let k = Term::Atom(Var::key("K"));
    let terms = [Term::enc(k.clone(), Term::pk(a.clone())), Term::enc(tau.clone(), k)];
    assert_eq!(steps_to_learn(&a, AgentScope::Known, &terms, &tau), Some(2));
}

#[test]
fn intruder_examples() {
    let b = Term::Atom(Value::agent("b"));
    let s = Value::agent("s");
    let k1 = Term::Atom(Value::Key(Fresh::honest(1)));
    let k2 = Term::Atom(Value::Key(Fresh::honest(2)));
    let c1 = Term::enc(k1.clone(), Term::pk(s.clone()));

    let kn = intruder_close(&KnowledgeSet::new(), [Term::tuple([b.clone(), c1.clone()])]);
    assert_eq!(kn.basic(), &[b.clone()].into_iter().collect());
    assert_eq!(kn.crypto(), &[c1].into_iter().collect());

    let start = intruder_close(&KnowledgeSet::new(), [k1.clone()]);
    let kn = intruder_close(&start, [Term::enc(k2.clone(), k1.clone())]);
    assert_eq!(kn.basic(), &[k1.clone(), k2].into_iter().collect());
    assert_eq!(intruder_close(&kn, []), kn);

    let ki = Term::Atom(Value::Key(Fresh::intruder(0)));
    let kn = intruder_close(&KnowledgeSet::new(), [ki.clone()]);
    assert!(intruder_can_derive(&kn, &Term::tuple([b, Term::enc(ki, Term::pk(s))])));

    let a = Value::agent("a");
    assert!(!intruder_can_derive(&KnowledgeSet::new(), &Term::sk(a.clone())));
    let own = Term::enc(Term::Atom(a.clone()), Term::shk(a, Value::intruder()));
    assert!(intruder_can_derive(&KnowledgeSet::new(), &own));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn intruder_close_is_incremental(
        first in prop::collection::vec(term(), 0..=3),
        second in prop::collection::vec(term(), 0..=3),
    ) {
        let ground = |t: &T| t.map_atoms(&mut |v: &Var| {
            let id = || v.name()[1..].parse().unwrap();
            match v.sort() {
                Sort::ShortKey => Value::Key(Fresh::honest(id())),
                Sort::Nonce => Value::Nonce(Fresh::honest(id())),
                Sort::Constant => Value::Const(v.name().into()),
                Sort::Agent => Value::agent(v.name()),
            }
        });
        let f: Vec<_> = first.iter().map(ground).collect();
        let s: Vec<_> = second.iter().map(ground).collect();
        let once = intruder_close(&KnowledgeSet::new(), f.iter().chain(&s).cloned());
        let twice = intruder_close(&intruder_close(&KnowledgeSet::new(), f), s);
        prop_assert_eq!(once, twice);
    }
}
