//! Symbolic and concrete terms over associative pairing and encryption.
//!
//! Both term kinds share one tree, [`Term`], parameterised by the atom type:
//! [`Var`] for protocol templates and [`Value`] for the ground terms that
//! flow through traces. Tuples are kept in canonical form (flattened, never
//! of length < 2), so structural equality is equality modulo associativity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::Hash;
use std::sync::Arc;

use thiserror::Error;

/// Name of the unique dishonest agent.
pub const INTRUDER: &str = "I";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sort {
    Agent,
    Nonce,
    ShortKey,
    Constant,
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sort::Agent => "agent",
            Sort::Nonce => "nonce",
            Sort::ShortKey => "short-term key",
            Sort::Constant => "constant",
        })
    }
}

/// Atoms a term tree can be built over.
pub trait Atom: Clone + Ord + Hash + fmt::Debug + fmt::Display + Send + Sync {
    fn sort(&self) -> Sort;
}

/// A typed protocol variable (or a constant, whose valuation is fixed).
#[derive(Clone, Hash)]
pub struct Var {
    name: Arc<str>,
    sort: Sort,
}

// Variables are cloned from a few declarations, so shared names are the
// common case when comparing.
impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.name, &other.name) || self.name == other.name) && self.sort == other.sort
    }
}

impl Eq for Var {}

impl Ord for Var {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        if Arc::ptr_eq(&self.name, &other.name) {
            return self.sort.cmp(&other.sort);
        }
        self.name.cmp(&other.name).then(self.sort.cmp(&other.sort))
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Var {
    pub fn new(name: &str, sort: Sort) -> Self {
        Var { name: Arc::from(name), sort }
    }

    pub fn agent(name: &str) -> Self {
        Var::new(name, Sort::Agent)
    }

    pub fn nonce(name: &str) -> Self {
        Var::new(name, Sort::Nonce)
    }

    pub fn key(name: &str) -> Self {
        Var::new(name, Sort::ShortKey)
    }

    pub fn constant(name: &str) -> Self {
        Var::new(name, Sort::Constant)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Atom for Var {
    fn sort(&self) -> Sort {
        self.sort
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// A fresh nonce or short-term key value. Intruder-owned values come from the
/// intruder's initial pool and are never renamed during state deduplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fresh {
    pub intruder: bool,
    pub id: u32,
}

impl Fresh {
    pub fn honest(id: u32) -> Self {
        Fresh { intruder: false, id }
    }

    pub fn intruder(id: u32) -> Self {
        Fresh { intruder: true, id }
    }
}

/// Ground atomic values.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Agent(Arc<str>),
    Nonce(Fresh),
    Key(Fresh),
    Const(Arc<str>),
}

impl Value {
    pub fn agent(name: &str) -> Self {
        Value::Agent(Arc::from(name))
    }

    pub fn intruder() -> Self {
        Value::agent(INTRUDER)
    }

    pub fn is_intruder(&self) -> bool {
        matches!(self, Value::Agent(n) if &**n == INTRUDER)
    }

    pub fn fresh(&self) -> Option<Fresh> {
        match self {
            Value::Nonce(f) | Value::Key(f) => Some(*f),
            _ => None,
        }
    }
}

impl Atom for Value {
    fn sort(&self) -> Sort {
        match self {
            Value::Agent(_) => Sort::Agent,
            Value::Nonce(_) => Sort::Nonce,
            Value::Key(_) => Sort::ShortKey,
            Value::Const(_) => Sort::Constant,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Agent(n) | Value::Const(n) => f.write_str(n),
            Value::Nonce(Fresh { intruder: false, id }) => write!(f, "n{id}"),
            Value::Nonce(Fresh { intruder: true, id }) => write!(f, "nI{id}"),
            Value::Key(Fresh { intruder: false, id }) => write!(f, "k{id}"),
            Value::Key(Fresh { intruder: true, id }) => write!(f, "kI{id}"),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Key classes used by the well-composedness element-count condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyType {
    Public,
    Private,
    LongTermSymmetric,
    ShortTerm,
}

impl fmt::Display for KeyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyType::Public => "public",
            KeyType::Private => "private",
            KeyType::LongTermSymmetric => "long-term symmetric",
            KeyType::ShortTerm => "short-term",
        })
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term<A> {
    Atom(A),
    /// Long-term public encryption key of an agent.
    Pk(A),
    /// Long-term private encryption key of an agent.
    Sk(A),
    /// Long-term symmetric key shared by two agents; arguments are stored sorted.
    Shk(A, A),
    Tuple(Vec<Term<A>>),
    Enc(Box<Term<A>>, Box<Term<A>>),
}

pub type SymbolicTerm = Term<Var>;
pub type ConcreteTerm = Term<Value>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermError {
    #[error("malformed term: {0}")]
    MalformedTerm(String),
    #[error("no value bound for component `{0}`")]
    UnboundComponent(String),
    #[error("`{template}` is a {expected} but was given `{value}`")]
    SortMismatch {
        template: String,
        expected: Sort,
        value: String,
    },
}

impl<A: Atom> Term<A> {
    pub fn atom(a: A) -> Self {
        Term::Atom(a)
    }

    pub fn pk(a: A) -> Self {
        Term::Pk(a)
    }

    pub fn sk(a: A) -> Self {
        Term::Sk(a)
    }

    pub fn shk(a: A, b: A) -> Self {
        if a <= b {
            Term::Shk(a, b)
        } else {
            Term::Shk(b, a)
        }
    }

    /// Builds a canonical tuple from already-canonical items: nested tuples
    /// are spliced and a single element stands for itself.
    pub fn tuple(items: impl IntoIterator<Item = Term<A>>) -> Self {
        let mut flat = Vec::new();
        for item in items {
            match item {
                Term::Tuple(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().expect("one element")
        } else {
            Term::Tuple(flat)
        }
    }

    /// Encrypts `body` under `key`. The key must be key-sorted.
    pub fn enc(body: Term<A>, key: Term<A>) -> Self {
        debug_assert!(key.is_key(), "non-key term in key position");
        Term::Enc(Box::new(body), Box::new(key))
    }

    pub fn try_enc(body: Term<A>, key: Term<A>) -> Result<Self, TermError> {
        if key.is_key() {
            Ok(Term::Enc(Box::new(body), Box::new(key)))
        } else {
            Err(TermError::MalformedTerm(format!("`{key}` cannot be used as a key")))
        }
    }

    pub fn is_key(&self) -> bool {
        match self {
            Term::Atom(a) => matches!(a.sort(), Sort::ShortKey | Sort::Constant),
            Term::Pk(_) | Term::Sk(_) | Term::Shk(..) => true,
            _ => false,
        }
    }

    pub fn is_enc(&self) -> bool {
        matches!(self, Term::Enc(..))
    }

    pub fn key_type(&self) -> Option<KeyType> {
        match self {
            Term::Pk(_) => Some(KeyType::Public),
            Term::Sk(_) => Some(KeyType::Private),
            Term::Shk(..) => Some(KeyType::LongTermSymmetric),
            Term::Atom(a) if matches!(a.sort(), Sort::ShortKey | Sort::Constant) => {
                Some(KeyType::ShortTerm)
            }
            _ => None,
        }
    }

    pub fn as_atom(&self) -> Option<&A> {
        match self {
            Term::Atom(a) => Some(a),
            _ => None,
        }
    }

    /// Elements of a tuple, or the term itself as a one-element sequence.
    pub fn elements(&self) -> &[Term<A>] {
        match self {
            Term::Tuple(items) => items,
            other => std::slice::from_ref(other),
        }
    }

    /// Rebuilds an arbitrary tree into canonical form.
    pub fn canonicalize(self) -> Result<Self, TermError> {
        Ok(match self {
            Term::Tuple(items) => {
                if items.is_empty() {
                    return Err(TermError::MalformedTerm("empty tuple".into()));
                }
                let items = items
                    .into_iter()
                    .map(Term::canonicalize)
                    .collect::<Result<Vec<_>, _>>()?;
                Term::tuple(items)
            }
            Term::Enc(body, key) => {
                let body = body.canonicalize()?;
                let key = key.canonicalize()?;
                Term::try_enc(body, key)?
            }
            Term::Shk(a, b) => {
                check_agent(&a)?;
                check_agent(&b)?;
                Term::shk(a, b)
            }
            Term::Pk(a) => {
                check_agent(&a)?;
                Term::Pk(a)
            }
            Term::Sk(a) => {
                check_agent(&a)?;
                Term::Sk(a)
            }
            atom @ Term::Atom(_) => atom,
        })
    }

    pub fn is_canonical(&self) -> bool {
        match self {
            Term::Tuple(items) => {
                items.len() >= 2
                    && items
                        .iter()
                        .all(|t| !matches!(t, Term::Tuple(_)) && t.is_canonical())
            }
            Term::Enc(body, key) => key.is_key() && body.is_canonical(),
            Term::Shk(a, b) => a <= b,
            _ => true,
        }
    }

    /// Maximum nesting of encryptions along any root-to-leaf path.
    pub fn encryption_depth(&self) -> usize {
        match self {
            Term::Tuple(items) => items.iter().map(Term::encryption_depth).max().unwrap_or(0),
            Term::Enc(body, key) => 1 + body.encryption_depth().max(key.encryption_depth()),
            _ => 0,
        }
    }

    /// Visits the term and every subterm (including key positions and the
    /// agent arguments of key constructors) in pre-order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Term<A>)) {
        f(self);
        match self {
            Term::Tuple(items) => items.iter().for_each(|t| t.visit(f)),
            Term::Enc(body, key) => {
                body.visit(f);
                key.visit(f);
            }
            _ => {}
        }
    }

    /// The reflexive-transitive subterm set, including key positions.
    pub fn subterms(&self) -> BTreeSet<Term<A>> {
        let mut out = BTreeSet::new();
        self.collect_subterms(&mut out);
        out
    }

    fn collect_subterms(&self, out: &mut BTreeSet<Term<A>>) {
        out.insert(self.clone());
        match self {
            Term::Tuple(items) => items.iter().for_each(|t| t.collect_subterms(out)),
            Term::Enc(body, key) => {
                body.collect_subterms(out);
                key.collect_subterms(out);
            }
            Term::Pk(a) | Term::Sk(a) => {
                out.insert(Term::Atom(a.clone()));
            }
            Term::Shk(a, b) => {
                out.insert(Term::Atom(a.clone()));
                out.insert(Term::Atom(b.clone()));
            }
            Term::Atom(_) => {}
        }
    }

    /// Every atom occurring anywhere in the term, key arguments included.
    pub fn atoms(&self) -> BTreeSet<A> {
        let mut out = BTreeSet::new();
        self.visit(&mut |t| match t {
            Term::Atom(a) | Term::Pk(a) | Term::Sk(a) => {
                out.insert(a.clone());
            }
            Term::Shk(a, b) => {
                out.insert(a.clone());
                out.insert(b.clone());
            }
            _ => {}
        });
        out
    }

    /// All distinct encrypted subterms, in pre-order of first occurrence.
    pub fn encrypted_subterms(&self) -> Vec<&Term<A>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        self.visit(&mut |t| {
            if t.is_enc() && seen.insert(t) {
                out.push(t);
            }
        });
        out
    }

    /// Maps every atom through `f`, re-canonicalising key constructors.
    pub fn map_atoms<B: Atom>(&self, f: &mut impl FnMut(&A) -> B) -> Term<B> {
        match self {
            Term::Atom(a) => Term::Atom(f(a)),
            Term::Pk(a) => Term::Pk(f(a)),
            Term::Sk(a) => Term::Sk(f(a)),
            Term::Shk(a, b) => Term::shk(f(a), f(b)),
            Term::Tuple(items) => Term::Tuple(items.iter().map(|t| t.map_atoms(f)).collect()),
            Term::Enc(body, key) => Term::Enc(Box::new(body.map_atoms(f)), Box::new(key.map_atoms(f))),
        }
    }
}

fn check_agent<A: Atom>(a: &A) -> Result<(), TermError> {
    if a.sort() == Sort::Agent {
        Ok(())
    } else {
        Err(TermError::MalformedTerm(format!(
            "key constructor argument `{a}` is not an agent"
        )))
    }
}

impl<A: Atom> fmt::Display for Term<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(a) => write!(f, "{a}"),
            Term::Pk(a) => write!(f, "pk({a})"),
            Term::Sk(a) => write!(f, "sk({a})"),
            Term::Shk(a, b) => write!(f, "shk({a},{b})"),
            Term::Tuple(items) => {
                for (i, t) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    // canonical tuples never nest directly; parenthesise anything else
                    if matches!(t, Term::Tuple(_)) {
                        write!(f, "({t})")?;
                    } else {
                        write!(f, "{t}")?;
                    }
                }
                Ok(())
            }
            Term::Enc(body, key) => write!(f, "{{{body}}}{key}"),
        }
    }
}

impl<A: Atom> fmt::Debug for Term<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A valuation of component templates: variables and encrypted terms.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Valuation {
    map: BTreeMap<SymbolicTerm, ConcreteTerm>,
}

impl Valuation {
    pub fn new() -> Self {
        Valuation::default()
    }

    /// Binds `template` to `value`, rejecting sort mismatches and conflicting
    /// rebinding. Rebinding to the same value is a no-op.
    pub fn bind(&mut self, template: SymbolicTerm, value: ConcreteTerm) -> Result<(), TermError> {
        check_sort(&template, &value)?;
        match self.map.get(&template) {
            Some(old) if *old != value => Err(TermError::MalformedTerm(format!(
                "`{template}` already bound to `{old}`, not `{value}`"
            ))),
            Some(_) => Ok(()),
            None => {
                self.map.insert(template, value);
                Ok(())
            }
        }
    }

    pub fn get(&self, template: &SymbolicTerm) -> Option<&ConcreteTerm> {
        self.map.get(template)
    }

    pub fn get_var(&self, var: &Var) -> Option<&ConcreteTerm> {
        self.map.get(&Term::Atom(var.clone()))
    }

    pub fn contains(&self, template: &SymbolicTerm) -> bool {
        self.map.contains_key(template)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SymbolicTerm, &ConcreteTerm)> {
        self.map.iter()
    }

    pub fn values(&self) -> impl Iterator<Item = &ConcreteTerm> {
        self.map.values()
    }

    pub fn remove(&mut self, template: &SymbolicTerm) -> Option<ConcreteTerm> {
        self.map.remove(template)
    }

    /// Keeps only the bindings whose template satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&SymbolicTerm) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    /// Applies `f` to every bound value. `f` must preserve sorts.
    pub fn map_values(&self, mut f: impl FnMut(&ConcreteTerm) -> ConcreteTerm) -> Valuation {
        Valuation {
            map: self.map.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Value of an agent variable, if bound to an agent.
    pub fn agent(&self, var: &Var) -> Option<&Value> {
        match self.get_var(var) {
            Some(Term::Atom(v @ Value::Agent(_))) => Some(v),
            _ => None,
        }
    }
}

fn check_sort(template: &SymbolicTerm, value: &ConcreteTerm) -> Result<(), TermError> {
    let ok = match (template, value) {
        (Term::Atom(v), Term::Atom(x)) => v.sort() == x.sort(),
        (Term::Atom(_), _) => false,
        (Term::Enc(..), Term::Enc(..)) => true,
        (Term::Enc(..), _) => false,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        let expected = match template {
            Term::Atom(v) => v.sort(),
            _ => Sort::Constant,
        };
        Err(TermError::SortMismatch {
            template: template.to_string(),
            expected,
            value: value.to_string(),
        })
    }
}

/// Value of a constant symbol.
pub fn constant_value(c: &Var) -> Value {
    Value::Const(Arc::from(c.name()))
}

/// Substitutes every maximal component of `t` bound in `v` and
/// canonicalises the result. Constants evaluate to themselves.
pub fn apply_valuation(t: &SymbolicTerm, v: &Valuation) -> Result<ConcreteTerm, TermError> {
    if let Some(value) = v.get(t) {
        return Ok(value.clone());
    }
    let agent = |a: &Var| -> Result<Value, TermError> {
        match v.get_var(a) {
            Some(Term::Atom(x @ Value::Agent(_))) => Ok(x.clone()),
            Some(other) => Err(TermError::SortMismatch {
                template: a.to_string(),
                expected: Sort::Agent,
                value: other.to_string(),
            }),
            None => Err(TermError::UnboundComponent(a.to_string())),
        }
    };
    Ok(match t {
        Term::Atom(a) if a.sort() == Sort::Constant => Term::Atom(constant_value(a)),
        Term::Atom(a) => return Err(TermError::UnboundComponent(a.to_string())),
        Term::Pk(a) => Term::Pk(agent(a)?),
        Term::Sk(a) => Term::Sk(agent(a)?),
        Term::Shk(a, b) => Term::shk(agent(a)?, agent(b)?),
        Term::Tuple(items) => Term::tuple(
            items
                .iter()
                .map(|x| apply_valuation(x, v))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Term::Enc(body, key) => Term::try_enc(apply_valuation(body, v)?, apply_valuation(key, v)?)?,
    })
}
