//! Line-oriented multi-user scripts run over an in-process network.
//!
//! ```text
//! step enroll alice universe='team="red"' dmax=2 expect granted
//! step link alice bob dist=1 creds='team="red"' expect granted
//! step publish alice doc content=hello policy='team="red"' expect granted
//! step propagate expect granted
//! step access bob alice doc content=hello expect granted
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use crate::node::{Grant, Labels, Node, NodeError, Profile};
use crate::policy::{parse_credentials, ConditionUniverse};
use crate::repo::{RepoStore, Repository};
use crate::scheme::{AttributeSchema, Dimension, PolicyPair};

pub const DEFAULT_D_MAX: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Granted,
    Denied,
    Error,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expect::Granted => "granted",
            Expect::Denied => "denied",
            Expect::Error => "error",
        })
    }
}

#[derive(Debug, Clone)]
pub enum ProfileSpec {
    Universe(String),
    Binary(usize),
    Arities(Vec<u32>),
}

#[derive(Debug, Clone)]
pub enum GrantSpec {
    Credentials(String),
    Pattern(Vec<Option<u32>>),
}

#[derive(Debug, Clone)]
pub enum LabelSpec {
    Policy(String),
    Pairs(Vec<PolicyPair>),
}

#[derive(Debug, Clone)]
pub enum Step {
    Enroll {
        user: String,
        profile: ProfileSpec,
        d_max: u32,
    },
    Link {
        from: String,
        to: String,
        distance: u32,
        grant: GrantSpec,
    },
    Publish {
        owner: String,
        name: String,
        content: String,
        labels: LabelSpec,
    },
    Access {
        user: String,
        owner: String,
        name: String,
        content: Option<String>,
    },
    Propagate,
    Revoke {
        owner: String,
        peer: String,
    },
}

#[derive(Debug, Clone)]
pub struct ScriptStep {
    pub line: usize,
    pub text: String,
    pub step: Step,
    pub expect: Expect,
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioScript {
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError {
        line,
        message: message.into(),
    }
}

fn parse_pattern(s: &str) -> Option<Vec<Option<u32>>> {
    s.split(',')
        .map(|t| match t.trim() {
            "*" => Some(None),
            t => t.parse().ok().map(Some),
        })
        .collect()
}

/// `0,1/1;1,0/2` is two pairs.
fn parse_pairs(s: &str) -> Option<Vec<PolicyPair>> {
    s.split(';')
        .map(|p| {
            let (x, d) = p.trim().split_once('/')?;
            let x = x
                .split(',')
                .map(|t| t.trim().parse().ok())
                .collect::<Option<Vec<u32>>>()?;
            Some(PolicyPair::new(x, d.trim().parse().ok()?))
        })
        .collect()
}

struct Args<'a> {
    line: usize,
    positional: Vec<&'a str>,
    options: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn new(line: usize, tokens: &'a [String]) -> Self {
        let mut positional = Vec::new();
        let mut options = BTreeMap::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v))
                    if !k.is_empty()
                        && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') =>
                {
                    options.insert(k, v);
                }
                _ => positional.push(t.as_str()),
            }
        }
        Args {
            line,
            positional,
            options,
        }
    }

    fn take(&self, n: usize, usage: &str) -> Result<Vec<String>, ScenarioError> {
        if self.positional.len() != n {
            return Err(err(self.line, format!("usage: {usage}")));
        }
        Ok(self.positional.iter().map(|s| s.to_string()).collect())
    }

    fn opt(&self, k: &str) -> Option<&'a str> {
        self.options.get(k).copied()
    }

    fn check_known(&self, known: &[&str]) -> Result<(), ScenarioError> {
        match self.options.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(err(self.line, format!("unknown option {k}"))),
            None => Ok(()),
        }
    }

    fn number(&self, k: &str) -> Result<Option<u32>, ScenarioError> {
        self.opt(k)
            .map(|v| {
                v.parse()
                    .map_err(|_| err(self.line, format!("{k} must be a number")))
            })
            .transpose()
    }
}

fn parse_step(line: usize, tokens: &[String]) -> Result<Step, ScenarioError> {
    let verb = tokens[0].as_str();
    let a = Args::new(line, &tokens[1..]);
    match verb {
        "enroll" => {
            a.check_known(&["universe", "binary", "arity", "dmax"])?;
            let user = a
                .take(1, "enroll <user> [universe=..|binary=n|arity=a,b] [dmax=d]")?
                .remove(0);
            let profile = match (a.opt("universe"), a.number("binary")?, a.opt("arity")) {
                (Some(u), None, None) => ProfileSpec::Universe(u.into()),
                (None, Some(n), None) => ProfileSpec::Binary(n as usize),
                (None, None, Some(s)) => ProfileSpec::Arities(
                    s.split(',')
                        .map(|t| t.trim().parse().ok())
                        .collect::<Option<_>>()
                        .ok_or_else(|| err(line, "bad arity list"))?,
                ),
                (None, None, None) => ProfileSpec::Binary(1),
                _ => return Err(err(line, "at most one of universe, binary, arity")),
            };
            let d_max = a.number("dmax")?.unwrap_or(DEFAULT_D_MAX);
            Ok(Step::Enroll {
                user,
                profile,
                d_max,
            })
        }
        "link" => {
            a.check_known(&["dist", "creds", "pattern"])?;
            let [from, to] = <[String; 2]>::try_from(
                a.take(2, "link <from> <to> dist=d (creds=..|pattern=..)")?,
            )
            .unwrap();
            let distance = a.number("dist")?.unwrap_or(1);
            let grant = match (a.opt("creds"), a.opt("pattern")) {
                (Some(c), None) => GrantSpec::Credentials(c.into()),
                (None, Some(p)) => {
                    GrantSpec::Pattern(parse_pattern(p).ok_or_else(|| err(line, "bad pattern"))?)
                }
                _ => return Err(err(line, "link needs exactly one of creds, pattern")),
            };
            Ok(Step::Link {
                from,
                to,
                distance,
                grant,
            })
        }
        "publish" => {
            a.check_known(&["content", "policy", "pairs"])?;
            let [owner, name] = <[String; 2]>::try_from(
                a.take(2, "publish <owner> <name> content=.. (policy=..|pairs=..)")?,
            )
            .unwrap();
            let labels = match (a.opt("policy"), a.opt("pairs")) {
                (Some(p), None) => LabelSpec::Policy(p.into()),
                (None, Some(p)) => {
                    LabelSpec::Pairs(parse_pairs(p).ok_or_else(|| err(line, "bad pairs"))?)
                }
                _ => return Err(err(line, "publish needs exactly one of policy, pairs")),
            };
            let content = a.opt("content").unwrap_or(&name).to_string();
            Ok(Step::Publish {
                owner,
                name,
                content,
                labels,
            })
        }
        "access" => {
            a.check_known(&["content"])?;
            let [user, owner, name] =
                <[String; 3]>::try_from(a.take(3, "access <user> <owner> <name> [content=..]")?)
                    .unwrap();
            Ok(Step::Access {
                user,
                owner,
                name,
                content: a.opt("content").map(String::from),
            })
        }
        "propagate" | "delegate-propagate" => {
            a.check_known(&[])?;
            a.take(0, "propagate")?;
            Ok(Step::Propagate)
        }
        "revoke" => {
            a.check_known(&[])?;
            let [owner, peer] =
                <[String; 2]>::try_from(a.take(2, "revoke <owner> <peer>")?).unwrap();
            Ok(Step::Revoke { owner, peer })
        }
        other => Err(err(line, format!("unknown verb {other}"))),
    }
}

impl Step {
    fn users(&self) -> Vec<&str> {
        match self {
            Step::Enroll { .. } | Step::Propagate => vec![],
            Step::Link { from, to, .. } => vec![from, to],
            Step::Publish { owner, .. } => vec![owner],
            Step::Access { user, owner, .. } => vec![user, owner],
            Step::Revoke { owner, peer } => vec![owner, peer],
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioScript, ScenarioError> {
    let mut steps = Vec::new();
    let mut enrolled = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens = shlex::split(trimmed).ok_or_else(|| err(line, "unbalanced quotes"))?;
        if tokens.first().map(String::as_str) != Some("step") {
            return Err(err(line, "expected `step`"));
        }
        let n = tokens.len();
        if n < 4 || tokens[n - 2] != "expect" {
            return Err(err(line, "expected `... expect <granted|denied|error>`"));
        }
        let expect = match tokens[n - 1].as_str() {
            "granted" => Expect::Granted,
            "denied" => Expect::Denied,
            "error" => Expect::Error,
            o => return Err(err(line, format!("unknown outcome {o}"))),
        };
        let step = parse_step(line, &tokens[1..n - 2])?;
        if let Some(u) = step.users().into_iter().find(|u| !enrolled.contains(*u)) {
            return Err(err(line, format!("{u} is not enrolled by an earlier step")));
        }
        if let Step::Enroll { user, .. } = &step {
            enrolled.insert(user.clone());
        }
        steps.push(ScriptStep {
            line,
            text: trimmed.to_string(),
            step,
            expect,
        });
    }
    Ok(ScenarioScript { steps })
}

/// Nodes sharing one in-memory repository; the repository mailboxes are the
/// message bus.
pub struct Network {
    repo: Arc<RepoStore>,
    nodes: BTreeMap<String, Node>,
    seed: u64,
}

impl Network {
    pub fn new(seed: u64) -> Self {
        Network {
            repo: Arc::new(RepoStore::in_memory()),
            nodes: BTreeMap::new(),
            seed,
        }
    }

    pub fn repo(&self) -> &Arc<RepoStore> {
        &self.repo
    }

    pub fn enroll(&mut self, user: &str, profile: Profile) -> Result<&mut Node, NodeError> {
        let seed = self
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(self.nodes.len() as u64);
        let node = Node::enroll(user, profile, self.repo.clone(), Some(seed))?;
        Ok(self.nodes.entry(user.to_string()).or_insert(node))
    }

    pub fn node(&self, user: &str) -> Result<&Node, NodeError> {
        self.nodes
            .get(user)
            .ok_or_else(|| NodeError::UnknownUser(user.into()))
    }

    pub fn node_mut(&mut self, user: &str) -> Result<&mut Node, NodeError> {
        self.nodes
            .get_mut(user)
            .ok_or_else(|| NodeError::UnknownUser(user.into()))
    }

    /// Takes a node out of the network, e.g. to drive it from another thread.
    pub fn remove(&mut self, user: &str) -> Result<Node, NodeError> {
        self.nodes
            .remove(user)
            .ok_or_else(|| NodeError::UnknownUser(user.into()))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    /// Creates the link and posts the resulting key messages.
    pub fn link(
        &mut self,
        from: &str,
        to: &str,
        grant: Grant,
        distance: u32,
    ) -> Result<(), NodeError> {
        let node = self.node_mut(from)?;
        let out = node.create_link(to, grant, distance)?;
        node.send(&out)
    }

    /// Revokes and posts the refreshed keys for surviving peers.
    pub fn revoke(&mut self, owner: &str, peer: &str) -> Result<(), NodeError> {
        let node = self.node_mut(owner)?;
        let receipt = node.revoke_link(peer)?;
        node.send(&receipt.messages)
    }

    /// Drains every mailbox until no node has pending messages.
    pub fn propagate(&mut self) -> Result<usize, NodeError> {
        let mut total = 0;
        loop {
            let mut round = 0;
            for node in self.nodes.values_mut() {
                round += node.process_mailbox()?;
            }
            if round == 0 {
                return Ok(total);
            }
            total += round;
        }
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (id, node) in &self.nodes {
            let _ = writeln!(s, "{id}: epoch {}", node.epoch());
            for (peer, link) in node.issued() {
                let _ = writeln!(s, "  link -> {peer} {:?}", link.pattern());
            }
            for (peer, _) in node.revoked_pending() {
                let _ = writeln!(s, "  pending revocation of {peer}");
            }
            for owner in node.key_ring_owners() {
                for (chain, key) in node.held_keys(&owner) {
                    let _ = writeln!(
                        s,
                        "  holds {owner} key via {} {:?} epoch {}",
                        chain.join(">"),
                        key.pattern(),
                        key.epoch()
                    );
                }
            }
            for (name, p) in node.publications() {
                let _ = writeln!(s, "  publishes {name} v{} pairs {:?}", p.version, p.pairs);
            }
        }
        for (owner, epoch) in self.repo.epochs() {
            let n = self
                .repo
                .list_resources(&owner)
                .map(|r| r.len())
                .unwrap_or(0);
            let _ = writeln!(s, "repo: {owner} epoch {epoch}, {n} resources");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub line: usize,
    pub text: String,
    pub expected: Expect,
    pub actual: Expect,
    pub detail: Option<String>,
}

impl StepResult {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub results: Vec<StepResult>,
    /// Network state at the first failing step.
    pub divergence: Option<String>,
}

impl Transcript {
    pub fn passed(&self) -> bool {
        self.divergence.is_none()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let verdict = if r.passed() { "pass" } else { "FAIL" };
            write!(f, "{verdict} line {}: {} -> {}", r.line, r.text, r.actual)?;
            if let Some(d) = &r.detail {
                write!(f, " ({d})")?;
            }
            writeln!(f)?;
        }
        if let Some(dump) = &self.divergence {
            writeln!(f, "state at divergence:")?;
            f.write_str(dump)?;
        }
        Ok(())
    }
}

fn build_profile(profile: &ProfileSpec, d_max: u32) -> Result<Profile, NodeError> {
    Ok(match profile {
        ProfileSpec::Universe(text) => Profile::Universe(ConditionUniverse::parse(text, d_max)?),
        ProfileSpec::Binary(n) => Profile::Schema(AttributeSchema::binary(*n, d_max)?),
        ProfileSpec::Arities(a) => Profile::Schema(AttributeSchema::new(
            a.iter()
                .enumerate()
                .map(|(i, &arity)| Dimension {
                    name: format!("dim{}", i + 1),
                    arity,
                })
                .collect(),
            d_max,
        )?),
    })
}

fn execute(net: &mut Network, step: &Step) -> Result<Option<String>, NodeError> {
    match step {
        Step::Enroll {
            user,
            profile,
            d_max,
        } => {
            net.enroll(user, build_profile(profile, *d_max)?)?;
        }
        Step::Link {
            from,
            to,
            distance,
            grant,
        } => {
            let grant = match grant {
                GrantSpec::Credentials(text) => Grant::Credentials(parse_credentials(text)?),
                GrantSpec::Pattern(y) => Grant::Pattern(y.clone()),
            };
            net.link(from, to, grant, *distance)?;
        }
        Step::Publish {
            owner,
            name,
            content,
            labels,
        } => {
            let labels = match labels {
                LabelSpec::Policy(p) => Labels::Policy(p.clone()),
                LabelSpec::Pairs(p) => Labels::Pairs(p.clone()),
            };
            net.node_mut(owner)?
                .publish_with(name, "text/plain", content.as_bytes(), labels)?;
        }
        Step::Access {
            user,
            owner,
            name,
            content,
        } => {
            let got = net.node(user)?.access_traced(owner, name)?;
            if let Some(want) = content {
                if got.plaintext != want.as_bytes() {
                    return Err(NodeError::Corrupt(format!(
                        "plaintext {:?} differs from expected",
                        String::from_utf8_lossy(&got.plaintext)
                    )));
                }
            }
            return Ok(Some(format!("via {}", got.chain.join(">"))));
        }
        Step::Propagate => {
            let n = net.propagate()?;
            return Ok(Some(format!("{n} messages")));
        }
        Step::Revoke { owner, peer } => net.revoke(owner, peer)?,
    }
    Ok(None)
}

/// Runs every step in order and stops at the first unexpected outcome.
pub fn run_scenario(script: &ScenarioScript, seed: u64) -> Transcript {
    let mut net = Network::new(seed);
    let mut t = Transcript::default();
    for s in &script.steps {
        let (actual, detail) = match execute(&mut net, &s.step) {
            Ok(d) => (Expect::Granted, d),
            Err(NodeError::Denied) => (Expect::Denied, None),
            Err(e) => (Expect::Error, Some(e.to_string())),
        };
        let r = StepResult {
            line: s.line,
            text: s.text.clone(),
            expected: s.expect,
            actual,
            detail,
        };
        let ok = r.passed();
        t.results.push(r);
        if !ok {
            t.divergence = Some(net.dump());
            break;
        }
    }
    t
}
