mod common;

use std::collections::BTreeSet;

use dove::cli::{parse_spec, render_spec};
use dove::corpus;
use dove::deduction::{intruder_close, KnowledgeSet};
use dove::harden::harden;
use dove::protocol::ProtocolTemplate;
use dove::semantics::{
    enabled_receives, enabled_sends, initial_state, step, successors, Bounds, Event, EventKind,
    LazyIntruder, Model, Scenario, State, Trace,
};
use dove::term::{Atom, Fresh, Term, Value};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn protocols() -> Vec<ProtocolTemplate> {
    let mut out: Vec<ProtocolTemplate> = corpus::ALL.iter().map(|t| parse_spec(t).unwrap()).collect();
    out.push(harden(&out[0], Default::default()).unwrap());
    out
}

/// Follows `choices` through the successor relation, stopping early when
/// nothing is enabled.
fn walk(model: &Model, bounds: &Bounds, scenario: &Scenario, choices: &[usize]) -> Trace {
    let initial = initial_state(model, bounds, 1);
    let mut steps: Vec<(Event, State)> = Vec::new();
    for c in choices {
        let here = steps.last().map_or(&initial, |(_, s)| s);
        let mut next = successors(model, here, bounds, scenario, &LazyIntruder);
        if next.is_empty() {
            break;
        }
        let i = c % next.len();
        steps.push(next.swap_remove(i));
    }
    Trace { initial, steps }
}

fn intruder_seed(model: &Model, bounds: &Bounds) -> Vec<Term<Value>> {
    let mut init = model.protocol.intruder_initial.clone();
    for i in 1..=bounds.intruder_fresh {
        init.push(Term::Atom(Value::Nonce(Fresh::intruder(i))));
        init.push(Term::Atom(Value::Key(Fresh::intruder(i))));
    }
    init
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_runs_keep_the_state_invariants(
        which in 0usize..4,
        choices in prop::collection::vec(any::<usize>(), 0..10),
    ) {
        let p = &protocols()[which];
        let model = Model::new(p).unwrap();
        let bounds = Bounds::for_protocol(p);
        let scenario = Scenario::default_for(p);
        let trace = walk(&model, &bounds, &scenario, &choices);

        let mut sent = intruder_seed(&model, &bounds);
        let mut prev = &trace.initial;
        for (e, s) in &trace.steps {
            match e.kind {
                EventKind::Send => sent.push(e.message.clone()),
                EventKind::Receive => prop_assert_eq!(&s.intruder, &prev.intruder),
            }
            // the intruder knows exactly the closure of what was sent
            prop_assert_eq!(&*s.intruder, &intruder_close(&KnowledgeSet::new(), sent.clone()));
            for session in &s.sessions {
                prop_assert_eq!(session.valuation.agent(&session.role), Some(&session.owner));
                for (t, v) in session.valuation.iter() {
                    if let (Term::Atom(x), Term::Atom(a)) = (t, v) {
                        prop_assert_eq!(x.sort(), a.sort());
                    }
                }
            }
            prev = s;
        }

        let events: Vec<Event> = trace.events().cloned().collect();
        let again = Trace::replay(&model, trace.initial.clone(), &events).unwrap();
        prop_assert_eq!(again, trace);
    }

    #[test]
    fn rendering_parses_back(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = common::random_protocol(&mut rng);
        let p = parse_spec(&text).unwrap();
        prop_assert_eq!(parse_spec(&render_spec(&p)).unwrap(), p);
    }
}

#[test]
fn corpus_renders_and_parses_back() {
    for p in protocols() {
        assert_eq!(parse_spec(&render_spec(&p)).unwrap(), p);
    }
}

#[test]
fn initial_state_holds_only_the_intruder_seed() {
    let p = parse_spec(corpus::TMN).unwrap();
    let model = Model::new(&p).unwrap();
    let mut bounds = Bounds::for_protocol(&p);
    bounds.intruder_fresh = 0;
    let s = initial_state(&model, &bounds, 1);
    assert!(s.sessions.is_empty());
    assert!(s.intruder.is_empty());

    bounds.intruder_fresh = 1;
    let s = initial_state(&model, &bounds, 1);
    assert!(s.sessions.is_empty());
    assert!(s.intruder.basic().contains(&Term::Atom(Value::Key(Fresh::intruder(1)))));
}

#[test]
fn first_send_of_tmn() {
    let p = parse_spec(corpus::TMN).unwrap();
    let model = Model::new(&p).unwrap();
    let mut bounds = Bounds::for_protocol(&p);
    bounds.intruder_fresh = 0;
    let scenario = Scenario::default_for(&p);
    let s = initial_state(&model, &bounds, 1);
    let sends = enabled_sends(&model, &s, &bounds, &scenario);
    let (e, next) = sends
        .iter()
        .find(|(e, _)| e.sender == Value::agent("a") && e.receiver == Value::agent("s") && e.message.elements()[0] == Term::Atom(Value::agent("b")))
        .expect("a starts a session with b through s");
    let cypher = e.message.elements()[1].clone();
    let Term::Enc(body, key) = &cypher else { panic!("{cypher}") };
    assert_eq!(**key, Term::Pk(Value::agent("s")));
    assert!(matches!(**body, Term::Atom(Value::Key(Fresh { intruder: false, .. }))));
    assert_eq!(next.intruder.basic(), &BTreeSet::from([Term::Atom(Value::agent("b"))]));
    assert_eq!(next.intruder.crypto(), &BTreeSet::from([cypher.clone()]));

    // a second A session generates a different key
    let again = enabled_sends(&model, next, &bounds, &scenario);
    let other: Vec<&Event> = again.iter().map(|(e, _)| e).filter(|e| e.role.name() == "A" && e.sid != 0).collect();
    assert!(!other.is_empty());
    for e in other {
        let Term::Enc(b2, _) = &e.message.elements()[1] else { panic!() };
        assert_ne!(b2, body);
    }
}

#[test]
fn receive_checks_bound_components() {
    let p = parse_spec(corpus::TMN).unwrap();
    let model = Model::new(&p).unwrap();
    let bounds = Bounds::for_protocol(&p);
    let scenario = Scenario::default_for(&p);
    let s = initial_state(&model, &bounds, 1);
    let receives = enabled_receives(&model, &s, &bounds, &scenario, &LazyIntruder);
    // S accepts the intruder's own key under its public key, from any claimed sender
    let ki = Term::enc(Term::Atom(Value::Key(Fresh::intruder(1))), Term::pk(Value::agent("s")));
    let claimed: BTreeSet<Value> = receives
        .iter()
        .filter(|(e, _)| e.message.elements().get(1) == Some(&ki))
        .map(|(e, _)| e.sender.clone())
        .collect();
    assert!(claimed.contains(&Value::agent("a")));
    assert!(claimed.contains(&Value::intruder()));

    // with a bound component, an altered message is refused
    let (e, _) = receives.iter().find(|(e, _)| e.message.elements().get(1) == Some(&ki)).unwrap();
    let mut wrong = e.clone();
    wrong.message = Term::tuple([Term::Atom(Value::agent("a")), ki]);
    assert!(step(&model, &s, &wrong).is_err());
}

#[test]
fn step_replaces_one_of_two_equal_sessions() {
    let p = parse_spec(corpus::TMN).unwrap();
    let model = Model::new(&p).unwrap();
    let bounds = Bounds::for_protocol(&p);
    let scenario = Scenario::default_for(&p);
    let trace = walk(&model, &bounds, &scenario, &[0, 0, 0, 0]);
    let last = trace.last_state();
    for (e, next) in successors(&model, last, &bounds, &scenario, &LazyIntruder) {
        let changed = last
            .sessions
            .iter()
            .filter(|s| next.session(s.sid) != Some(s))
            .count();
        assert!(changed <= 1, "{e}");
        assert!(next.sessions.len() <= last.sessions.len() + 1);
    }
}
