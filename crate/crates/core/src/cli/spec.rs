//! The line-oriented protocol specification format.
//!
//! ```text
//! protocol TMN
//! roles A S B
//! nonces N
//! keys Ka Kb
//! consts c
//! init A: S, pk(S)
//! intruder: sk(c)
//! 1. A -> S : B, {Ka}pk(S)
//! secret Kb from B
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::protocol::{MessageTemplate, ProtocolError, ProtocolTemplate, Secret};
use crate::term::{Atom, ConcreteTerm, Sort, SymbolicTerm, Term, Value, Var, INTRUDER};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("{line}:{col}: expected {expected}")]
    Parse {
        line: usize,
        col: usize,
        expected: String,
    },
    #[error("{line}:{col}: undeclared identifier `{name}`")]
    UndeclaredVariable {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: `{name}` is declared twice")]
    DuplicateDeclaration {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ProtocolError,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(usize),
    Arrow,
    Sym(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Num(n) => format!("`{n}`"),
            Tok::Arrow => "`->`".into(),
            Tok::Sym(c) => format!("`{c}`"),
        }
    }
}

fn tokenize(line_no: usize, line: &str) -> Result<Vec<(Tok, usize)>, SpecError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == '#' {
            break;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let n = text.parse().map_err(|_| SpecError::Parse {
                line: line_no,
                col,
                expected: "a message index".into(),
            })?;
            out.push((Tok::Num(n), col));
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push((Tok::Arrow, col));
            i += 2;
        } else if "{}(),:.".contains(c) {
            out.push((Tok::Sym(c), col));
            i += 1;
        } else {
            return Err(SpecError::Parse {
                line: line_no,
                col,
                expected: format!("a token, found `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    line: usize,
    toks: &'a [(Tok, usize)],
    pos: usize,
    end_col: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |(_, c)| *c)
    }

    fn error(&self, expected: &str) -> SpecError {
        let found = self
            .peek()
            .map_or_else(|| "end of line".to_string(), Tok::describe);
        SpecError::Parse {
            line: self.line,
            col: self.col(),
            expected: format!("{expected}, found {found}"),
        }
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), SpecError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("`{c}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize), SpecError> {
        let col = self.col();
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok((s, col))
            }
            _ => Err(self.error(what)),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_end(&self) -> Result<(), SpecError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error("end of line"))
        }
    }
}

type Resolver<'r, A> = dyn Fn(&str, usize, usize) -> Result<A, SpecError> + 'r;

fn parse_term<A: Atom>(cur: &mut Cursor<'_>, resolve: &Resolver<'_, A>) -> Result<Term<A>, SpecError> {
    let mut items = vec![parse_elem(cur, resolve)?];
    while cur.eat(',') {
        items.push(parse_elem(cur, resolve)?);
    }
    Ok(Term::tuple(items))
}

fn parse_elem<A: Atom>(cur: &mut Cursor<'_>, resolve: &Resolver<'_, A>) -> Result<Term<A>, SpecError> {
    if cur.eat('{') {
        let body = parse_term(cur, resolve)?;
        cur.expect('}')?;
        let col = cur.col();
        let key = parse_elem(cur, resolve)?;
        if !key.is_key() {
            return Err(SpecError::Parse {
                line: cur.line,
                col,
                expected: format!("a key after `}}`, found `{key}`"),
            });
        }
        return Ok(Term::enc(body, key));
    }
    if cur.eat('(') {
        let t = parse_term(cur, resolve)?;
        cur.expect(')')?;
        return Ok(t);
    }
    let (name, col) = cur.ident("a term")?;
    match name.as_str() {
        "pk" | "sk" | "shk" => {
            cur.expect('(')?;
            let mut args = vec![parse_agent(cur, resolve)?];
            while cur.eat(',') {
                args.push(parse_agent(cur, resolve)?);
            }
            cur.expect(')')?;
            let arity = if name == "shk" { 2 } else { 1 };
            if args.len() != arity {
                return Err(SpecError::Parse {
                    line: cur.line,
                    col,
                    expected: format!("{arity} argument(s) to `{name}`"),
                });
            }
            let mut args = args.into_iter();
            let first = args.next().expect("arity checked");
            Ok(match name.as_str() {
                "pk" => Term::pk(first),
                "sk" => Term::sk(first),
                _ => Term::shk(first, args.next().expect("arity checked")),
            })
        }
        _ => Ok(Term::Atom(resolve(&name, cur.line, col)?)),
    }
}

fn parse_agent<A: Atom>(cur: &mut Cursor<'_>, resolve: &Resolver<'_, A>) -> Result<A, SpecError> {
    let (name, col) = cur.ident("an agent")?;
    let a = resolve(&name, cur.line, col)?;
    if a.sort() != Sort::Agent {
        return Err(SpecError::Parse {
            line: cur.line,
            col,
            expected: format!("an agent, found {} `{name}`", a.sort()),
        });
    }
    Ok(a)
}

const KEYWORDS: [&str; 11] = [
    "protocol", "roles", "nonces", "keys", "consts", "init", "intruder", "secret", "pk", "sk",
    "shk",
];

/// Parses a specification file into a validated protocol template.
pub fn parse_spec(text: &str) -> Result<ProtocolTemplate, SpecError> {
    let mut p = ProtocolTemplate::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut have_name = false;
    let mut first_message_line = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks = tokenize(line, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor {
            line,
            toks: &toks,
            pos: 0,
            end_col: raw.chars().count() + 1,
        };
        match cur.next().expect("non-empty") {
            Tok::Ident(kw) if kw == "protocol" => {
                if have_name {
                    return Err(SpecError::Parse {
                        line,
                        col: 1,
                        expected: "a single `protocol` line".into(),
                    });
                }
                p.name = cur.ident("a protocol name")?.0;
                cur.expect_end()?;
                have_name = true;
            }
            Tok::Ident(kw) if matches!(kw.as_str(), "roles" | "nonces" | "keys" | "consts") => {
                let sort = match kw.as_str() {
                    "roles" => Sort::Agent,
                    "nonces" => Sort::Nonce,
                    "keys" => Sort::ShortKey,
                    _ => Sort::Constant,
                };
                while !cur.at_end() {
                    let (name, col) = cur.ident("an identifier")?;
                    if KEYWORDS.contains(&name.as_str()) || name == INTRUDER {
                        return Err(SpecError::Parse {
                            line,
                            col,
                            expected: format!("an identifier, found reserved word `{name}`"),
                        });
                    }
                    if !seen.insert(name.clone()) {
                        return Err(SpecError::DuplicateDeclaration { line, col, name });
                    }
                    let v = Var::new(&name, sort);
                    match sort {
                        Sort::Agent => p.roles.push(v),
                        Sort::Nonce => p.nonces.push(v),
                        Sort::ShortKey => p.keys.push(v),
                        Sort::Constant => p.constants.push(v),
                    }
                }
            }
            Tok::Ident(kw) if kw == "init" => {
                let (name, col) = cur.ident("a role")?;
                let role = p
                    .role(&name)
                    .cloned()
                    .ok_or(SpecError::UndeclaredVariable { line, col, name })?;
                cur.expect(':')?;
                let terms = parse_list(&mut cur, &symbolic_resolver(&p))?;
                if p.initial_knowledge.insert(role.clone(), terms).is_some() {
                    return Err(SpecError::DuplicateDeclaration {
                        line,
                        col,
                        name: format!("init {role}"),
                    });
                }
            }
            Tok::Ident(kw) if kw == "intruder" => {
                cur.expect(':')?;
                let consts = p.constants.clone();
                let resolve = move |name: &str, _: usize, _: usize| -> Result<Value, SpecError> {
                    Ok(if consts.iter().any(|c| c.name() == name) {
                        Value::Const(name.into())
                    } else {
                        Value::agent(name)
                    })
                };
                let terms: Vec<ConcreteTerm> = parse_list(&mut cur, &resolve)?;
                p.intruder_initial.extend(terms);
            }
            Tok::Ident(kw) if kw == "secret" => {
                let (name, col) = cur.ident("a variable")?;
                let var = p
                    .lookup(&name)
                    .cloned()
                    .ok_or(SpecError::UndeclaredVariable { line, col, name: name.clone() })?;
                if !matches!(var.sort(), Sort::Nonce | Sort::ShortKey) {
                    return Err(SpecError::Parse {
                        line,
                        col,
                        expected: format!("a nonce or short-term key, found {} `{name}`", var.sort()),
                    });
                }
                let viewpoint = if cur.at_end() {
                    None
                } else {
                    match cur.ident("`from`")? {
                        (kw, _) if kw == "from" => {}
                        (_, col) => {
                            return Err(SpecError::Parse {
                                line,
                                col,
                                expected: "`from`".into(),
                            })
                        }
                    }
                    let (name, col) = cur.ident("a role")?;
                    Some(
                        p.role(&name)
                            .cloned()
                            .ok_or(SpecError::UndeclaredVariable { line, col, name })?,
                    )
                };
                cur.expect_end()?;
                p.secrets.push(Secret { var, viewpoint });
            }
            Tok::Num(index) => {
                if index != p.messages.len() + 1 {
                    return Err(SpecError::Parse {
                        line,
                        col: 1,
                        expected: format!("message index {}", p.messages.len() + 1),
                    });
                }
                cur.expect('.')?;
                let sender = parse_role(&mut cur, &p)?;
                if cur.next() != Some(Tok::Arrow) {
                    cur.pos -= 1;
                    return Err(cur.error("`->`"));
                }
                let receiver = parse_role(&mut cur, &p)?;
                cur.expect(':')?;
                let content = parse_term(&mut cur, &symbolic_resolver(&p))?;
                cur.expect_end()?;
                if sender == receiver {
                    return Err(SpecError::Invalid {
                        line,
                        source: ProtocolError::SelfMessage {
                            index,
                            role: sender.to_string(),
                        },
                    });
                }
                first_message_line.get_or_insert(line);
                p.messages.push(MessageTemplate {
                    index,
                    sender,
                    receiver,
                    content,
                });
            }
            other => {
                return Err(SpecError::Parse {
                    line,
                    col: 1,
                    expected: format!("a declaration or message, found {}", other.describe()),
                })
            }
        }
    }
    if !have_name {
        return Err(SpecError::Parse {
            line: 1,
            col: 1,
            expected: "a `protocol NAME` line".into(),
        });
    }
    p.validate().map_err(|source| SpecError::Invalid {
        line: first_message_line.unwrap_or(1),
        source,
    })?;
    Ok(p)
}

fn symbolic_resolver(p: &ProtocolTemplate) -> impl Fn(&str, usize, usize) -> Result<Var, SpecError> + '_ {
    move |name: &str, line: usize, col: usize| {
        p.lookup(name).cloned().ok_or(SpecError::UndeclaredVariable {
            line,
            col,
            name: name.to_string(),
        })
    }
}

fn parse_role(cur: &mut Cursor<'_>, p: &ProtocolTemplate) -> Result<Var, SpecError> {
    let (name, col) = cur.ident("a role")?;
    p.role(&name).cloned().ok_or(SpecError::UndeclaredVariable {
        line: cur.line,
        col,
        name,
    })
}

fn parse_list<A: Atom>(cur: &mut Cursor<'_>, resolve: &Resolver<'_, A>) -> Result<Vec<Term<A>>, SpecError> {
    if cur.at_end() {
        return Ok(Vec::new());
    }
    let t = parse_term(cur, resolve)?;
    cur.expect_end()?;
    Ok(t.elements().to_vec())
}

/// Renders a protocol template back into the specification format.
pub fn render_spec(p: &ProtocolTemplate) -> String {
    let mut out = String::new();
    let names = |vs: &[Var]| vs.iter().map(|v| v.name().to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "protocol {}", p.name);
    let _ = writeln!(out, "roles {}", names(&p.roles));
    for (kw, vs) in [("nonces", &p.nonces), ("keys", &p.keys), ("consts", &p.constants)] {
        if !vs.is_empty() {
            let _ = writeln!(out, "{kw} {}", names(vs));
        }
    }
    for role in &p.roles {
        if let Some(terms) = p.initial_knowledge.get(role) {
            let _ = writeln!(out, "init {role}: {}", list(terms));
        }
    }
    if !p.intruder_initial.is_empty() {
        let _ = writeln!(out, "intruder: {}", list(&p.intruder_initial));
    }
    out.push('\n');
    for m in &p.messages {
        let _ = writeln!(out, "{}. {} -> {} : {}", m.index, m.sender, m.receiver, m.content);
    }
    if !p.secrets.is_empty() {
        out.push('\n');
    }
    for s in &p.secrets {
        match &s.viewpoint {
            Some(r) => {
                let _ = writeln!(out, "secret {} from {r}", s.var);
            }
            None => {
                let _ = writeln!(out, "secret {}", s.var);
            }
        }
    }
    out
}

fn list<A: Atom>(terms: &[Term<A>]) -> String {
    terms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

/// A symbolic term in spec-file syntax, for tests and tooling.
pub fn parse_symbolic(p: &ProtocolTemplate, text: &str) -> Result<SymbolicTerm, SpecError> {
    let toks = tokenize(1, text)?;
    let mut cur = Cursor {
        line: 1,
        toks: &toks,
        pos: 0,
        end_col: text.chars().count() + 1,
    };
    let t = parse_term(&mut cur, &symbolic_resolver(p))?;
    cur.expect_end()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn parses_tmn() {
        let p = parse_spec(corpus::TMN).unwrap();
        assert_eq!(p.name, "TMN");
        assert_eq!(p.messages.len(), 4);
        let roles: Vec<&str> = p.roles.iter().map(Var::name).collect();
        assert_eq!(roles, ["A", "S", "B"]);
        assert_eq!(p.messages[0].content.to_string(), "B, {Ka}pk(S)");
        assert_eq!(p.secrets.len(), 1);
    }

    #[test]
    fn rejects_self_message() {
        let err = parse_spec("protocol P\nroles A\nnonces N\n1. A -> A : N\n").unwrap_err();
        assert!(matches!(
            err,
            SpecError::Invalid {
                source: ProtocolError::SelfMessage { .. },
                ..
            }
        ));
    }

    #[test]
    fn rejects_undeclared() {
        let err = parse_spec("protocol P\nroles A B\nkeys Ka\n1. A -> B : Kc\n").unwrap_err();
        assert_eq!(
            err,
            SpecError::UndeclaredVariable {
                line: 4,
                col: 13,
                name: "Kc".into()
            }
        );
    }

    #[test]
    fn rejects_duplicates_and_bad_syntax() {
        assert!(matches!(
            parse_spec("protocol P\nroles A B\nkeys A\n"),
            Err(SpecError::DuplicateDeclaration { .. })
        ));
        let err = parse_spec("protocol P\nroles A B\nkeys K\n1. A -> B : {K}\n").unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 4, .. }));
        let err = parse_spec("protocol P\nroles A B\nnonces N\n1. A -> B : {A}N\n").unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 4, .. }));
        let err = parse_spec("protocol P\nroles A B\nkeys K\n2. A -> B : K\n").unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 4, .. }));
    }

    #[test]
    fn parentheses_group_and_flatten() {
        let p = parse_spec("protocol P\nroles A B\nnonces N M\n1. A -> B : (A, (N, M)), {(N)}pk(B)\n").unwrap();
        assert_eq!(p.messages[0].content.to_string(), "A, N, M, {N}pk(B)");
    }

    #[test]
    fn intruder_terms_are_concrete() {
        let p = parse_spec("protocol P\nroles A B\nconsts c\nintruder: sk(e), c\nnonces N\n1. A -> B : N\n").unwrap();
        assert_eq!(
            p.intruder_initial,
            vec![Term::Sk(Value::agent("e")), Term::Atom(Value::Const("c".into()))]
        );
    }

    #[test]
    fn render_round_trips_corpus() {
        for text in corpus::ALL {
            let p = parse_spec(text).unwrap();
            let again = parse_spec(&render_spec(&p)).unwrap();
            assert_eq!(p, again);
        }
    }
}
