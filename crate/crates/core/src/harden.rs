//! Well-composedness, the hardening class, the hardening transformation and
//! weak equivalence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::protocol::{check_realizable, MessageTemplate, ProtocolError, ProtocolTemplate};
use crate::term::{Atom, KeyType, Sort, SymbolicTerm, Term, Var};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HardenError {
    #[error("protocol is not in the hardening class: {}", join(.0))]
    NotInClassC(Vec<Witness>),
    #[error("protocol is already well composed under signature {0}")]
    AlreadyWellComposed(ProtocolSignature),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn join(ws: &[Witness]) -> String {
    ws.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("; ")
}

/// A session nonce followed by the roles in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSignature {
    pub nonce: Var,
    pub roles: Vec<Var>,
}

impl ProtocolSignature {
    pub fn elements(&self) -> Vec<SymbolicTerm> {
        std::iter::once(&self.nonce)
            .chain(&self.roles)
            .map(|v| Term::Atom(v.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.roles.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `<S, rest...>` as a flat tuple.
    fn prefix(&self, rest: SymbolicTerm) -> SymbolicTerm {
        Term::tuple(self.elements().into_iter().chain(std::iter::once(rest)))
    }

    fn heads(&self, body: &SymbolicTerm) -> bool {
        body.elements().starts_with(&self.elements())
    }
}

impl fmt::Display for ProtocolSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = std::iter::once(&self.nonce).chain(&self.roles).map(Var::name).collect();
        write!(f, "<{}>", names.join(","))
    }
}

impl Serialize for ProtocolSignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Evidence against one of the syntactic conditions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Witness {
    TooDeep {
        message: usize,
        term: SymbolicTerm,
    },
    KeyTransmitted {
        message: usize,
        key: SymbolicTerm,
    },
    /// A depth-two term not encrypted with the sender's private key.
    NotSignedBySender {
        message: usize,
        term: SymbolicTerm,
    },
    MissingSignature {
        message: usize,
        term: SymbolicTerm,
    },
    SameShape {
        first: SymbolicTerm,
        second: SymbolicTerm,
        key_type: KeyType,
        elements: usize,
    },
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::TooDeep { message, term } => {
                write!(f, "message {message}: `{term}` has encryption depth {}", term.encryption_depth())
            }
            Witness::KeyTransmitted { message, key } => write!(f, "message {message}: long-term key `{key}` is transmitted"),
            Witness::NotSignedBySender { message, term } => {
                write!(f, "message {message}: depth-two term `{term}` is not under the sender's private key")
            }
            Witness::MissingSignature { message, term } => {
                write!(f, "message {message}: `{term}` lacks the signature form")
            }
            Witness::SameShape {
                first,
                second,
                key_type,
                elements,
            } => write!(
                f,
                "`{first}` and `{second}`: same {key_type} key type, same key, {elements} element(s) each"
            ),
        }
    }
}

impl Serialize for Witness {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConditionVerdict {
    /// 1 to 4.
    pub condition: u8,
    pub witnesses: Vec<Witness>,
}

impl ConditionVerdict {
    pub fn passed(&self) -> bool {
        self.witnesses.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WellComposedReport {
    /// The signature satisfying condition 3, if any.
    pub signature: Option<ProtocolSignature>,
    pub conditions: [ConditionVerdict; 4],
}

impl WellComposedReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(ConditionVerdict::passed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassCReport {
    pub witnesses: Vec<Witness>,
}

impl ClassCReport {
    pub fn member(&self) -> bool {
        self.witnesses.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TagStyle {
    /// Copies of the last role after the signature.
    #[default]
    RolePadding,
    /// A distinct constant after the signature in every encrypted term.
    IntegerTags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct HardenOptions {
    pub tag_style: TagStyle,
}

fn too_deep(m: &MessageTemplate) -> Vec<Witness> {
    fn walk(t: &SymbolicTerm, message: usize, out: &mut Vec<Witness>) {
        match t {
            Term::Enc(..) if t.encryption_depth() > 2 => out.push(Witness::TooDeep { message, term: t.clone() }),
            Term::Enc(body, _) => walk(body, message, out),
            Term::Tuple(items) => items.iter().for_each(|i| walk(i, message, out)),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(&m.content, m.index, &mut out);
    out
}

/// Private and long-term symmetric keys in data positions.
fn transmitted_keys(m: &MessageTemplate) -> Vec<Witness> {
    fn walk(t: &SymbolicTerm, message: usize, out: &mut Vec<Witness>) {
        match t {
            Term::Sk(_) | Term::Shk(..) => {
                let w = Witness::KeyTransmitted { message, key: t.clone() };
                if !out.contains(&w) {
                    out.push(w);
                }
            }
            Term::Tuple(items) => items.iter().for_each(|i| walk(i, message, out)),
            Term::Enc(body, _) => walk(body, message, out),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(&m.content, m.index, &mut out);
    out
}

/// Membership in the class the hardening transformation accepts.
pub fn in_class_c(p: &ProtocolTemplate) -> ClassCReport {
    let mut witnesses = Vec::new();
    for m in &p.messages {
        witnesses.extend(too_deep(m));
        for t in m.content.encrypted_subterms() {
            if t.encryption_depth() == 2 {
                if let Term::Enc(_, key) = t {
                    if **key != Term::sk(m.sender.clone()) {
                        witnesses.push(Witness::NotSignedBySender {
                            message: m.index,
                            term: t.clone(),
                        });
                    }
                }
            }
        }
        witnesses.extend(transmitted_keys(m));
    }
    ClassCReport { witnesses }
}

fn signature_witnesses(p: &ProtocolTemplate, sig: Option<&ProtocolSignature>) -> Vec<Witness> {
    let mut out = Vec::new();
    for m in &p.messages {
        let Some(sig) = sig else {
            out.push(Witness::MissingSignature {
                message: m.index,
                term: m.content.clone(),
            });
            continue;
        };
        let items = m.content.elements();
        let n = sig.len();
        let shaped = items.len() == n + 1
            && items[..n] == sig.elements()[..]
            && matches!(&items[n], Term::Enc(body, key)
                if **key == Term::sk(m.sender.clone()) && sig.heads(body));
        if !shaped {
            out.push(Witness::MissingSignature {
                message: m.index,
                term: m.content.clone(),
            });
        }
        for t in m.content.encrypted_subterms() {
            if let Term::Enc(body, _) = t {
                if !sig.heads(body) {
                    out.push(Witness::MissingSignature {
                        message: m.index,
                        term: t.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Distinct encrypted subterms of the protocol in order of first occurrence.
fn encrypted_terms(p: &ProtocolTemplate) -> Vec<&SymbolicTerm> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in &p.messages {
        for t in m.content.encrypted_subterms() {
            if seen.insert(t) {
                out.push(t);
            }
        }
    }
    out
}

fn split_enc(t: &SymbolicTerm) -> (&SymbolicTerm, &SymbolicTerm) {
    match t {
        Term::Enc(body, key) => (body, key),
        _ => unreachable!("encrypted term expected"),
    }
}

/// Two same-typed encrypted terms under the same key with the same number
/// of elements collide, unless distinct constants follow the signature.
fn shape_collisions(p: &ProtocolTemplate, sig_len: usize) -> Vec<Witness> {
    let terms = encrypted_terms(p);
    let mut out = Vec::new();
    for (i, a) in terms.iter().enumerate() {
        let (ab, ak) = split_enc(a);
        for b in &terms[i + 1..] {
            let (bb, bk) = split_enc(b);
            if ak != bk || ab.elements().len() != bb.elements().len() {
                continue;
            }
            let tag = |body: &SymbolicTerm| {
                body.elements()
                    .get(sig_len)
                    .and_then(|t| t.as_atom())
                    .filter(|v| v.sort() == Sort::Constant)
                    .cloned()
            };
            if let (Some(x), Some(y)) = (tag(ab), tag(bb)) {
                if x != y {
                    continue;
                }
            }
            out.push(Witness::SameShape {
                first: (*a).clone(),
                second: (*b).clone(),
                key_type: ak.key_type().expect("key position"),
                elements: ab.elements().len(),
            });
        }
    }
    out
}

/// Candidate signatures: each declared nonce with the roles in declaration
/// order.
fn candidates(p: &ProtocolTemplate) -> impl Iterator<Item = ProtocolSignature> + '_ {
    p.nonces.iter().map(|n| ProtocolSignature {
        nonce: n.clone(),
        roles: p.roles.clone(),
    })
}

/// Evaluates the four well-composedness conditions.
pub fn check_well_composed(p: &ProtocolTemplate) -> WellComposedReport {
    let mut depth = Vec::new();
    let mut keys = Vec::new();
    for m in &p.messages {
        depth.extend(too_deep(m));
        keys.extend(transmitted_keys(m));
    }
    let mut signature = None;
    let mut sig_witnesses: Option<Vec<Witness>> = None;
    for sig in candidates(p) {
        let ws = signature_witnesses(p, Some(&sig));
        if ws.is_empty() {
            signature = Some(sig);
            sig_witnesses = Some(ws);
            break;
        }
        if sig_witnesses.as_ref().map_or(true, |best| ws.len() < best.len()) {
            sig_witnesses = Some(ws);
        }
    }
    let sig_witnesses = sig_witnesses.unwrap_or_else(|| signature_witnesses(p, None));
    let sig_len = signature.as_ref().map_or(0, ProtocolSignature::len);
    WellComposedReport {
        conditions: [
            ConditionVerdict {
                condition: 1,
                witnesses: depth,
            },
            ConditionVerdict {
                condition: 2,
                witnesses: keys,
            },
            ConditionVerdict {
                condition: 3,
                witnesses: sig_witnesses,
            },
            ConditionVerdict {
                condition: 4,
                witnesses: shape_collisions(p, sig_len),
            },
        ],
        signature,
    }
}

fn unused_name(p: &ProtocolTemplate, base: &str, from: usize) -> String {
    let taken = |n: &str| p.declared().any(|v| v.name() == n);
    if from == 0 && !taken(base) {
        return base.to_string();
    }
    (from.max(1)..)
        .map(|i| format!("{base}{i}"))
        .find(|n| !taken(n))
        .expect("some name is free")
}

/// Steps 1 and 2: the content becomes one tuple under the sender's private
/// key, with existing sender-signed elements opened into it.
fn sign(m: &MessageTemplate) -> SymbolicTerm {
    let own = Term::sk(m.sender.clone());
    let items = m.content.elements().iter().map(|t| match t {
        Term::Enc(body, key) if **key == own => (**body).clone(),
        other => other.clone(),
    });
    Term::enc(Term::tuple(items), own)
}

/// Step 3: the signature heads every encrypted body.
fn insert_signature(t: &SymbolicTerm, sig: &ProtocolSignature) -> SymbolicTerm {
    match t {
        Term::Tuple(items) => Term::tuple(items.iter().map(|i| insert_signature(i, sig))),
        Term::Enc(body, key) => Term::enc(sig.prefix(insert_signature(body, sig)), (**key).clone()),
        other => other.clone(),
    }
}

struct Discriminator<'a> {
    sig: &'a ProtocolSignature,
    style: TagStyle,
    /// Element counts taken so far, per key type.
    used: BTreeMap<KeyType, BTreeSet<usize>>,
    done: BTreeMap<SymbolicTerm, SymbolicTerm>,
    tags: Vec<Var>,
    tag_base: String,
    protocol: &'a ProtocolTemplate,
}

impl Discriminator<'_> {
    /// Step 5, bottom-up so that repeated subterms stay identical.
    fn apply(&mut self, t: &SymbolicTerm) -> SymbolicTerm {
        match t {
            Term::Tuple(items) => Term::tuple(items.iter().map(|i| self.apply(i))),
            Term::Enc(body, key) => {
                let inner = Term::tuple(body.elements().iter().map(|i| self.apply(i)));
                let plain = Term::enc(inner.clone(), (**key).clone());
                if let Some(done) = self.done.get(&plain) {
                    return done.clone();
                }
                let items = inner.elements();
                let n = self.sig.len();
                let extra: Vec<SymbolicTerm> = match self.style {
                    TagStyle::RolePadding => {
                        let kt = key.key_type().expect("key position");
                        let used = self.used.entry(kt).or_default();
                        let count = (items.len()..).find(|c| !used.contains(c)).expect("unbounded");
                        used.insert(count);
                        let last = self.sig.roles.last().expect("protocol has roles");
                        vec![Term::Atom(last.clone()); count - items.len()]
                    }
                    TagStyle::IntegerTags => {
                        let name = unused_name(self.protocol, &self.tag_base, self.tags.len() + 1);
                        let tag = Var::constant(&name);
                        self.tags.push(tag.clone());
                        vec![Term::Atom(tag)]
                    }
                };
                let padded = Term::tuple(
                    items[..n]
                        .iter()
                        .cloned()
                        .chain(extra)
                        .chain(items[n..].iter().cloned()),
                );
                let out = Term::enc(padded, (**key).clone());
                self.done.insert(plain, out.clone());
                out
            }
            other => other.clone(),
        }
    }
}

/// Turns a class-C protocol into a well-composed one.
pub fn harden(p: &ProtocolTemplate, opts: HardenOptions) -> Result<ProtocolTemplate, HardenError> {
    let report = check_well_composed(p);
    if let Some(sig) = report.signature {
        return Err(HardenError::AlreadyWellComposed(sig));
    }
    let class = in_class_c(p);
    if !class.member() {
        return Err(HardenError::NotInClassC(class.witnesses));
    }
    let nonce = Var::nonce(&unused_name(p, "N", 0));
    let sig = ProtocolSignature {
        nonce: nonce.clone(),
        roles: p.roles.clone(),
    };
    let mut out = p.clone();
    out.name = match opts.tag_style {
        TagStyle::RolePadding => format!("{}WellComposed", p.name),
        TagStyle::IntegerTags => format!("{}Tagged", p.name),
    };
    out.nonces.push(nonce);
    let mut d = Discriminator {
        sig: &sig,
        style: opts.tag_style,
        used: BTreeMap::new(),
        done: BTreeMap::new(),
        tags: Vec::new(),
        tag_base: "tag".into(),
        protocol: p,
    };
    for m in &mut out.messages {
        let signed = insert_signature(&sign(m), &sig);
        let body = d.apply(&signed);
        m.content = sig.prefix(body);
    }
    out.constants.extend(d.tags);
    out.validate()?;
    Ok(out)
}

/// Removes tags and padding: constants in `foreign` are dropped and runs of
/// equal tuple elements collapse to one.
fn normalize(t: &SymbolicTerm, foreign: &BTreeSet<Var>) -> SymbolicTerm {
    match t {
        Term::Tuple(items) => {
            let mut out: Vec<SymbolicTerm> = Vec::new();
            for i in items {
                if i.as_atom().is_some_and(|v| foreign.contains(v)) {
                    continue;
                }
                let n = normalize(i, foreign);
                if out.last() != Some(&n) {
                    out.push(n);
                }
            }
            Term::tuple(out)
        }
        Term::Enc(body, key) => {
            let b = match &**body {
                Term::Atom(v) if foreign.contains(v) => Term::Tuple(Vec::new()),
                other => normalize(other, foreign),
            };
            Term::enc(b, (**key).clone())
        }
        other => other.clone(),
    }
}

fn sigma(t: &SymbolicTerm, sig: &ProtocolSignature) -> SymbolicTerm {
    insert_signature(t, sig)
}

/// Whether `p2` has, at every step of every role, the knowledge of `p` plus
/// the roles and one new session nonce, with the signature heading every
/// encrypted term. Tags and padding are ignored.
pub fn weakly_equivalent(p: &ProtocolTemplate, p2: &ProtocolTemplate) -> Result<bool, HardenError> {
    let t1 = check_realizable(p).into_result()?;
    let t2 = check_realizable(p2).into_result()?;
    let new_nonces: Vec<&Var> = p2.nonces.iter().filter(|n| !p.nonces.contains(n)).collect();
    let [nonce] = new_nonces[..] else { return Ok(false) };
    if p.roles != p2.roles || p.messages.len() != p2.messages.len() {
        return Ok(false);
    }
    let sig = ProtocolSignature {
        nonce: nonce.clone(),
        roles: p.roles.clone(),
    };
    let foreign: BTreeSet<Var> = p2.constants.iter().filter(|c| !p.constants.contains(c)).cloned().collect();
    let extra: BTreeSet<SymbolicTerm> = sig.elements().into_iter().collect();
    for (a, b) in t1.iter().zip(&t2) {
        if a.role != b.role || a.messages != b.messages {
            return Ok(false);
        }
        for (ra, rb) in a.rows.iter().zip(&b.rows).skip(1) {
            let want_basic: BTreeSet<SymbolicTerm> = ra.basic().iter().chain(&extra).cloned().collect();
            let got_basic: BTreeSet<SymbolicTerm> = rb
                .basic()
                .iter()
                .filter(|t| !t.as_atom().is_some_and(|v| foreign.contains(v)))
                .cloned()
                .collect();
            let want_crypto: BTreeSet<SymbolicTerm> =
                ra.crypto().iter().map(|t| normalize(&sigma(t, &sig), &foreign)).collect();
            let got_crypto: BTreeSet<SymbolicTerm> = rb.crypto().iter().map(|t| normalize(t, &foreign)).collect();
            if want_basic != got_basic || want_crypto != got_crypto {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Protocol messages with tags and padding removed, for comparing hardened
/// protocols that differ only in how encrypted terms are told apart.
pub fn strip_discriminators(p: &ProtocolTemplate, reference: &ProtocolTemplate) -> Vec<SymbolicTerm> {
    let foreign: BTreeSet<Var> = p.constants.iter().filter(|c| !reference.constants.contains(c)).cloned().collect();
    p.messages.iter().map(|m| normalize(&m.content, &foreign)).collect()
}
