//! Specification files and the command-line front end.

mod report;
mod spec;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::deduction::DerivationStep;
use crate::harden::{self, HardenError, HardenOptions, TagStyle, Witness};
use crate::protocol::{check_realizable, revealed_vars, ProtocolTemplate, Realizability};
use crate::search::{self, AbstractProof, Explorer, SearchError, Target};
use crate::semantics::{Bounds, LazyIntruder, Model, Scenario, SemanticsError};
use crate::term::{Term, Value, Var};

pub use report::{RunReport, Stat, Table, TraceBlock, Verdict};
pub use spec::{parse_spec, parse_symbolic, render_spec, SpecError};

/// Environment variable fixing the first fresh-value counter used when
/// naming values in reported traces.
pub const SEED_VAR: &str = "DOVE_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{source}")]
    Spec {
        path: PathBuf,
        #[source]
        source: SpecError,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e) if !e.use_stderr() => 0,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dove", version, about = "Symbolic analysis of cryptographic protocols")]
struct Cli {
    /// Also write the report as JSON to FILE.
    #[arg(long, global = true, value_name = "FILE")]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a specification and print it in canonical form.
    Parse { file: PathBuf },
    /// Compute each role's knowledge table and check realizability.
    Realizable { file: PathBuf },
    /// Split nonces and keys into revealed and unrevealed variables.
    Revealed { file: PathBuf },
    /// Check the four well-composedness conditions.
    Wellcomposed { file: PathBuf },
    /// Check membership in the class the hardening applies to.
    Classc { file: PathBuf },
    /// Rewrite a protocol into well-composed form.
    Harden {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = TagArg::RolePadding)]
        tag_style: TagArg,
        /// Write the hardened specification to FILE instead of the report.
        #[arg(short, long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Check weak equivalence of two protocols.
    Equiv { first: PathBuf, second: PathBuf },
    /// Search the bounded state space for a secrecy attack.
    Search {
        file: PathBuf,
        #[command(flatten)]
        bounds: BoundArgs,
        /// Variable whose secrecy is checked.
        #[arg(long, requires = "viewpoint")]
        secret: Option<String>,
        /// Role from whose point of view the secret is checked.
        #[arg(long, requires = "secret")]
        viewpoint: Option<String>,
    },
    /// Check that every accepted message was sent by its claimed sender.
    Authcheck {
        file: PathBuf,
        #[command(flatten)]
        bounds: BoundArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TagArg {
    RolePadding,
    Int,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long, default_value_t = 2)]
    max_sessions: usize,
    #[arg(long, default_value_t = 12)]
    max_events: usize,
    #[arg(long, default_value_t = 2)]
    synth_depth: usize,
    #[arg(long, default_value_t = 1)]
    intruder_fresh: u32,
}

impl BoundArgs {
    fn bounds(&self, p: &ProtocolTemplate) -> Bounds {
        Bounds {
            max_sessions: self.max_sessions,
            max_events: self.max_events,
            max_synth_depth: self.synth_depth,
            intruder_fresh: self.intruder_fresh,
            ..Bounds::for_protocol(p)
        }
    }
}

/// Parses `args` (program name first), runs the command and writes any
/// requested files. The exit code is in the report.
pub fn run<I, T>(args: I) -> Result<RunReport, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let seed = match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse::<u32>()
            .map_err(|_| CliError::Input(format!("{SEED_VAR} must be a non-negative integer, got `{s}`")))?,
        Err(_) => 1,
    };
    let report = match &cli.command {
        Command::Parse { file } => cmd_parse(file)?,
        Command::Realizable { file } => cmd_realizable(file)?,
        Command::Revealed { file } => cmd_revealed(file)?,
        Command::Wellcomposed { file } => cmd_wellcomposed(file)?,
        Command::Classc { file } => cmd_classc(file)?,
        Command::Harden {
            file,
            tag_style,
            output,
        } => cmd_harden(file, *tag_style, output.as_deref())?,
        Command::Equiv { first, second } => cmd_equiv(first, second)?,
        Command::Search {
            file,
            bounds,
            secret,
            viewpoint,
        } => cmd_search(file, bounds, secret.as_deref().zip(viewpoint.as_deref()), seed)?,
        Command::Authcheck { file, bounds } => cmd_authcheck(file, bounds, seed)?,
    };
    if let Some(path) = &cli.json {
        std::fs::write(path, report.to_json()).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    }
    Ok(report)
}

fn load(path: &Path) -> Result<ProtocolTemplate, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_owned(),
        source,
    })?;
    parse_spec(&text).map_err(|source| CliError::Spec {
        path: path.to_owned(),
        source,
    })
}

fn inputs(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

fn witnesses(ws: &[Witness]) -> Vec<String> {
    ws.iter().map(Witness::to_string).collect()
}

fn cmd_parse(path: &Path) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("parse", inputs(&[path]));
    r.verdict(Verdict::new("well formed", true));
    r.stat("roles", p.roles.len());
    r.stat("messages", p.messages.len());
    r.text = Some(render_spec(&p));
    Ok(r)
}

fn realizable_report(p: &ProtocolTemplate, r: &mut RunReport) -> bool {
    let report = check_realizable(p);
    let mut columns = vec![String::new()];
    columns.extend(p.roles.iter().map(|r| r.to_string()));
    let mut rows = Vec::new();
    let mut initial = vec!["Initial".to_string()];
    for role in &p.roles {
        // a role's own name and private key go without saying
        let implicit = [Term::Atom(role.clone()), Term::sk(role.clone())];
        let known: BTreeSet<_> = p
            .initial_knowledge_of(role)
            .into_iter()
            .filter(|t| !implicit.contains(t))
            .collect();
        initial.push(join(&known));
    }
    rows.push(initial);
    for m in &p.messages {
        let mut row = vec![format!("Step {}", m.index)];
        for role in &p.roles {
            let cell = report
                .table(role)
                .and_then(|t| t.delta_at(m.index))
                .map(|d| join(&d))
                .unwrap_or_default();
            row.push(cell);
        }
        rows.push(row);
    }
    r.tables.push(Table {
        title: format!("knowledge of {}", p.name),
        columns,
        rows,
    });
    let mut v = Verdict::new("realizable", report.is_realizable());
    if let Realizability::Failure { role, message, missing } = &report.verdict {
        v.details.push(format!("role {role} cannot build `{missing}` in message {message}"));
    }
    r.verdict(v);
    report.is_realizable()
}

fn cmd_realizable(path: &Path) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("realizable", inputs(&[path]));
    realizable_report(&p, &mut r);
    Ok(r)
}

fn cmd_revealed(path: &Path) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("revealed", inputs(&[path]));
    let (revealed, unrevealed) = revealed_vars(&p);
    r.tables.push(Table {
        title: "variables".into(),
        columns: vec!["revealed".into(), "unrevealed".into()],
        rows: vec![vec![join(&revealed), join(&unrevealed)]],
    });
    let goals: Vec<&Var> = p.secrets.iter().map(|s| &s.var).filter(|v| revealed.contains(*v)).collect();
    let mut v = Verdict::new("declared secrets unrevealed", goals.is_empty());
    v.details.extend(goals.iter().map(|g| format!("`{g}` is revealed to a passive observer")));
    r.verdict(v);
    Ok(r)
}

fn cmd_wellcomposed(path: &Path) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("wellcomposed", inputs(&[path]));
    well_composed_report(&p, &mut r);
    Ok(r)
}

fn well_composed_report(p: &ProtocolTemplate, r: &mut RunReport) -> bool {
    let report = harden::check_well_composed(p);
    for c in &report.conditions {
        let mut v = Verdict::new(&format!("condition {}", c.condition), c.passed());
        v.details = witnesses(&c.witnesses);
        r.verdict(v);
    }
    if let Some(sig) = &report.signature {
        r.stat("signature", sig);
    }
    report.passed()
}

fn cmd_classc(path: &Path) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("classc", inputs(&[path]));
    let report = harden::in_class_c(&p);
    let mut v = Verdict::new("in hardening class", report.member());
    v.details = witnesses(&report.witnesses);
    r.verdict(v);
    Ok(r)
}

fn cmd_harden(path: &Path, style: TagArg, output: Option<&Path>) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("harden", inputs(&[path]));
    let opts = HardenOptions {
        tag_style: match style {
            TagArg::RolePadding => TagStyle::RolePadding,
            TagArg::Int => TagStyle::IntegerTags,
        },
    };
    let h = match harden::harden(&p, opts) {
        Ok(h) => h,
        Err(HardenError::NotInClassC(ws)) => {
            let mut v = Verdict::new("in hardening class", false);
            v.details = witnesses(&ws);
            r.verdict(v);
            return Ok(r);
        }
        Err(HardenError::AlreadyWellComposed(sig)) => {
            let mut v = Verdict::new("needs hardening", false);
            v.details.push(format!("already well composed under signature {sig}"));
            r.verdict(v);
            return Ok(r);
        }
        Err(e @ HardenError::Protocol(_)) => return Err(CliError::Input(e.to_string())),
    };
    let wc = well_composed_report(&h, &mut r);
    let realizable = realizable_report(&h, &mut r);
    r.tables.clear();
    if wc && realizable {
        let equiv = harden::weakly_equivalent(&p, &h).map_err(|e| CliError::Input(e.to_string()))?;
        r.verdict(Verdict::new("weakly equivalent to input", equiv));
    }
    let text = render_spec(&h);
    match output {
        Some(out) => {
            std::fs::write(out, &text).map_err(|source| CliError::Write {
                path: out.to_owned(),
                source,
            })?;
            r.stat("written", out.display());
        }
        None => r.text = Some(text),
    }
    Ok(r)
}

fn cmd_equiv(first: &Path, second: &Path) -> Result<RunReport, CliError> {
    let p = load(first)?;
    let p2 = load(second)?;
    let mut r = RunReport::new("equiv", inputs(&[first, second]));
    let equiv = harden::weakly_equivalent(&p, &p2).map_err(|e| CliError::Input(e.to_string()))?;
    r.verdict(Verdict::new("weakly equivalent", equiv));
    Ok(r)
}

fn bound_stats(r: &mut RunReport, b: &Bounds) {
    r.stat("max sessions", b.max_sessions);
    r.stat("max events", b.max_events);
    r.stat("synthesis depth", b.max_synth_depth);
    r.stat("intruder fresh", b.intruder_fresh);
    r.stat("agents", join(&b.agent_pool));
}

fn proof_stats(r: &mut RunReport, proof: &AbstractProof) {
    r.stat("abstract facts", proof.facts);
    r.stat("abstract sends", proof.sends);
    r.stat("abstract rounds", proof.rounds);
}

fn derivation_lines(steps: &[DerivationStep<Value>]) -> Vec<String> {
    steps
        .iter()
        .map(|s| match &s.via {
            Some(via) => format!("open {} using {} -> {}", s.cypher, via, s.yields),
            None => format!("open {} -> {}", s.cypher, s.yields),
        })
        .collect()
}

fn cmd_search(
    path: &Path,
    args: &BoundArgs,
    target: Option<(&str, &str)>,
    seed: u32,
) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("search", inputs(&[path]));
    let model = Model::new(&p)?;
    let bounds = args.bounds(&p);
    let scenario = Scenario::default_for(&p);
    let explorer = Explorer::new(&model, &bounds, &scenario, &LazyIntruder, seed)?;
    let requested = match target {
        Some((x, role)) => {
            let var = p
                .lookup(x)
                .ok_or_else(|| SearchError::UnknownVariable(x.to_string()))?
                .clone();
            let viewpoint = p.role(role).ok_or_else(|| SearchError::UnknownRole(role.to_string()))?.clone();
            Some(vec![Target { var, viewpoint }])
        }
        None => None,
    };
    bound_stats(&mut r, &bounds);
    let start = Instant::now();
    let out = search::find_secrecy_attack(&explorer, requested.as_deref(), seed)?;
    r.stat("elapsed ms", start.elapsed().as_millis());
    r.stat("targets", join(&out.plan.searched));
    for t in &out.plan.revealed {
        let mut v = Verdict::new(&format!("secrecy of {t}"), false);
        v.details.push("revealed to a passive observer".into());
        r.verdict(v);
    }
    for t in &out.plan.not_evaluable {
        r.stat("not evaluable", t);
    }
    match &out.proof {
        Some(proof) => {
            r.stat("method", "over-approximation");
            proof_stats(&mut r, proof);
        }
        None => {
            r.stat("method", "breadth-first search");
            r.stat("explored states", out.explored);
            r.stat("transitions", out.transitions);
        }
    }
    match &out.attack {
        Some(a) => {
            let mut v = Verdict::new(&format!("secrecy of {}", a.target), false);
            v.details.push(format!("{} learns {} = {}", Value::intruder(), a.target.var, a.value));
            r.verdict(v);
            r.traces.push(TraceBlock {
                title: "attack".into(),
                lines: a.lines.iter().enumerate().map(|(i, l)| l.render(i + 1)).collect(),
            });
            r.traces.push(TraceBlock {
                title: "events".into(),
                lines: a.events().iter().enumerate().map(|(i, e)| format!("{:02} {e}", i + 1)).collect(),
            });
            r.traces.push(TraceBlock {
                title: "derivation".into(),
                lines: derivation_lines(&a.derivation),
            });
        }
        None => {
            for t in &out.plan.searched {
                r.verdict(Verdict::new(&format!("secrecy of {t}"), true));
            }
        }
    }
    Ok(r)
}

fn cmd_authcheck(path: &Path, args: &BoundArgs, seed: u32) -> Result<RunReport, CliError> {
    let p = load(path)?;
    let mut r = RunReport::new("authcheck", inputs(&[path]));
    let model = Model::new(&p)?;
    let bounds = args.bounds(&p);
    let scenario = Scenario::default_for(&p);
    let explorer = Explorer::new(&model, &bounds, &scenario, &LazyIntruder, seed)?;
    bound_stats(&mut r, &bounds);
    let start = Instant::now();
    let report = search::authcheck(&explorer);
    r.stat("elapsed ms", start.elapsed().as_millis());
    match &report.proof {
        Some(proof) => {
            r.stat("method", "over-approximation");
            proof_stats(&mut r, proof);
        }
        None => {
            r.stat("method", "breadth-first search to the first violation");
            r.stat("explored states", report.explored);
            r.stat("transitions", report.transitions);
            r.stat("violating transitions", report.violating_transitions);
        }
    }
    let mut v = Verdict::new("authenticity", report.violations.is_empty());
    v.details = report.violations.iter().map(|x| x.to_string()).collect();
    r.verdict(v);
    Ok(r)
}
