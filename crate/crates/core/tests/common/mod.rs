//! Shared oracles: an unpruned receive enumerator, a plain breadth-first
//! search over it, and a generator of small random protocols.
#![allow(dead_code)]

pub mod terms;

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::hash::{Hash, Hasher};

use dove::cli::parse_spec;
use dove::search::{find_secrecy_attack, plan_targets, secrecy_violated, Explorer};
use dove::semantics::{
    initial_state, successors, Bounds, LazyIntruder, Model, ReceiveGenerator, Scenario, Site,
    State,
};
use dove::term::{constant_value, Atom, ConcreteTerm, Sort, SymbolicTerm, Term, Value, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Offers every instantiation of the expected template over all atoms
/// occurring in the state, with every observed cypher allowed in place of
/// any encrypted component, from every claimed sender. Nothing is filtered
/// by what the intruder knows; `step` does that.
pub struct BruteForce;

fn universe(state: &State, bounds: &Bounds) -> BTreeSet<Value> {
    let mut out: BTreeSet<Value> = bounds.agent_pool.iter().cloned().collect();
    let mut note = |t: &ConcreteTerm| out.extend(t.atoms());
    for s in &state.sessions {
        s.valuation.values().for_each(&mut note);
    }
    state.intruder.iter().for_each(&mut note);
    state.observed.iter().for_each(&mut note);
    out
}

fn instances(
    t: &SymbolicTerm,
    site: &Site<'_>,
    atoms: &BTreeSet<Value>,
    observed: &BTreeSet<ConcreteTerm>,
) -> Vec<ConcreteTerm> {
    if let Some(v) = site.valuation.get(t) {
        return vec![v.clone()];
    }
    let of_var = |x: &Var| -> Vec<Value> {
        match site.valuation.get_var(x).and_then(|v| v.as_atom()) {
            Some(a) => vec![a.clone()],
            None => atoms.iter().filter(|a| a.sort() == x.sort()).cloned().collect(),
        }
    };
    match t {
        Term::Atom(c) if c.sort() == Sort::Constant => vec![Term::Atom(constant_value(c))],
        Term::Atom(x) => of_var(x).into_iter().map(Term::Atom).collect(),
        Term::Pk(x) => of_var(x).into_iter().map(Term::Pk).collect(),
        Term::Sk(x) => of_var(x).into_iter().map(Term::Sk).collect(),
        Term::Shk(x, y) => {
            let ys = of_var(y);
            of_var(x)
                .into_iter()
                .flat_map(|a| ys.iter().map(move |b| Term::shk(a.clone(), b.clone())))
                .collect()
        }
        Term::Tuple(items) => {
            let mut partial: Vec<Vec<ConcreteTerm>> = vec![Vec::new()];
            for item in items {
                let choices = instances(item, site, atoms, observed);
                partial = partial
                    .iter()
                    .flat_map(|p| {
                        choices.iter().map(move |c| {
                            let mut q = p.clone();
                            q.push(c.clone());
                            q
                        })
                    })
                    .collect();
            }
            partial.into_iter().map(Term::tuple).collect()
        }
        Term::Enc(body, key) => {
            let keys = instances(key, site, atoms, observed);
            let mut out: Vec<ConcreteTerm> = observed.iter().cloned().collect();
            for b in instances(body, site, atoms, observed) {
                for k in &keys {
                    out.push(Term::enc(b.clone(), k.clone()));
                }
            }
            out
        }
    }
}

impl ReceiveGenerator for BruteForce {
    fn candidates(
        &self,
        _model: &Model,
        state: &State,
        bounds: &Bounds,
        site: &Site<'_>,
    ) -> BTreeSet<(Value, ConcreteTerm)> {
        let atoms = universe(state, bounds);
        let msgs = instances(&site.message().content, site, &atoms, &state.observed);
        let mut out = BTreeSet::new();
        for m in msgs {
            for b in &bounds.agent_pool {
                out.insert((b.clone(), m.clone()));
            }
        }
        out
    }
}

fn events(s: &State) -> usize {
    s.sessions.iter().map(|x| x.length).sum()
}

/// Breadth-first search over every single event, deduplicating only
/// identical states. Returns whether some reachable state breaks one of the
/// protocol's default targets, and the number of states visited.
pub fn brute_force_attack(model: &Model, bounds: &Bounds, scenario: &Scenario) -> (bool, usize) {
    let plan = plan_targets(model, None).expect("default targets");
    let broken = |s: &State| {
        plan.searched.iter().any(|t| {
            s.sessions
                .iter()
                .filter(|x| x.role == t.viewpoint)
                .any(|x| secrecy_violated(model, s, x, &t.var))
        })
    };
    let start = initial_state(model, bounds, 1);
    // states are identified by a hash of their full rendering
    let key = |s: &State| {
        let mut h = DefaultHasher::new();
        format!("{s:?}").hash(&mut h);
        h.finish()
    };
    let mut seen: HashSet<u64> = HashSet::new();
    seen.insert(key(&start));
    let mut frontier = vec![start];
    let mut visited = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for s in frontier {
            visited += 1;
            if broken(&s) {
                return (true, visited);
            }
            if events(&s) >= bounds.max_events {
                continue;
            }
            for (_, t) in successors(model, &s, bounds, scenario, &BruteForce) {
                if seen.insert(key(&t)) {
                    next.push(t);
                }
            }
        }
        frontier = next;
    }
    (false, visited)
}

/// A random protocol between `A` and `B` with one or two messages, in the
/// specification language. Not every result is realizable.
pub fn random_protocol(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..=2);
    let first = if rng.gen_bool(0.5) { ("A", "B") } else { ("B", "A") };
    let mut text = String::from("protocol Gen\nroles A B\nnonces Na Nb\nkeys K\n");
    let inits = [
        "",
        "init A: B, pk(B)\n",
        "init A: B\ninit B: A\n",
        "init A: B, pk(B)\ninit B: A, pk(A)\n",
    ];
    text.push_str(inits.choose(rng).unwrap());
    for i in 0..n {
        let (x, y) = if i == 0 { first } else { (first.1, first.0) };
        let own = if x == "A" { "Na" } else { "Nb" };
        let plain = [x, y, own, "K", "Na", "Nb"];
        let keys = [
            format!("pk({y})"),
            format!("sk({x})"),
            "shk(A, B)".to_string(),
            "K".to_string(),
        ];
        let mut parts: Vec<String> = (0..rng.gen_range(1..=2))
            .map(|_| plain.choose(rng).unwrap().to_string())
            .collect();
        if rng.gen_bool(0.8) {
            let inner: Vec<String> = (0..rng.gen_range(1..=2))
                .map(|_| plain.choose(rng).unwrap().to_string())
                .collect();
            parts.push(format!("{{{}}}{}", inner.join(", "), keys.choose(rng).unwrap()));
        }
        text.push_str(&format!("{}. {x} -> {y} : {}\n", i + 1, parts.join(", ")));
    }
    text
}

pub const CASES: usize = 200;

/// Compares the lazy search with the brute-force oracle on `CASES` random
/// realizable protocols with at least one secret to check. Returns the
/// mismatching specifications and the number of attacks found.
pub fn compare(seed: u64) -> (Vec<String>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    let mut attacks = 0;
    let mut cases = 0;
    while cases < CASES {
        let text = random_protocol(&mut rng);
        let Ok(p) = parse_spec(&text) else { continue };
        let Ok(model) = Model::new(&p) else { continue };
        if plan_targets(&model, None).map_or(true, |plan| plan.searched.is_empty()) {
            continue;
        }
        cases += 1;
        let mut bounds = Bounds::for_protocol(&p);
        bounds.max_events = 4;
        let scenario = Scenario::default_for(&p);
        let explorer = Explorer::new(&model, &bounds, &scenario, &LazyIntruder, 1).unwrap();
        let lazy = find_secrecy_attack(&explorer, None, 1).unwrap().attack.is_some();
        let (brute, _) = brute_force_attack(&model, &bounds, &scenario);
        if lazy != brute {
            mismatches.push(format!("lazy {lazy}, brute force {brute}\n{text}"));
        }
        attacks += brute as usize;
    }
    (mismatches, attacks)
}
