use std::collections::BTreeMap;
use std::fs::{self, DirBuilder};
use std::io::Write;
use std::os::unix::fs::DirBuilderExt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dbra_core::group::group_setup;
use dbra_core::harness::{bench_encrypt, parse_scenario, run_scenario};
use dbra_core::node::{Grant, Labels, Node, NodeError, Profile, DEFAULT_CONTENT_TYPE};
use dbra_core::policy::{parse_credentials, ConditionUniverse};
use dbra_core::repo::{
    serve_blocking, to_text_map, Limits, RemoteRepo, RepoError, RepoStore, Repository,
};
use dbra_core::scheme::{AttributeSchema, Dimension, PolicyPair, SchemeError};

#[derive(Parser)]
#[command(
    name = "dbra",
    version,
    about = "Distance-based revocable attribute encryption for social sharing"
)]
struct Cli {
    /// Directory holding the private stores, one file per user.
    #[arg(long, global = true, env = "DBRA_HOME", default_value = ".dbra")]
    home: PathBuf,
    /// On-disk repository directory (default: <home>/repo).
    #[arg(long, global = true)]
    repo: Option<PathBuf>,
    /// Repository server socket; takes precedence over --repo except for repo-serve.
    #[arg(long, global = true)]
    socket: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    /// Canonical `key=value` lines.
    Map,
}

#[derive(Args)]
struct As {
    /// Acting user.
    #[arg(long)]
    user: String,
}

#[derive(Subcommand)]
enum Command {
    /// Create the home and repository directories.
    Setup,
    /// Generate a master key pair and publish the public record.
    Enroll {
        #[command(flatten)]
        who: As,
        /// Condition universe in policy syntax, e.g. 'team="red"; level>=3'.
        #[arg(long, conflicts_with_all = ["binary", "arity"])]
        universe: Option<String>,
        /// Number of binary dimensions.
        #[arg(long, conflicts_with = "arity")]
        binary: Option<usize>,
        /// Comma-separated dimension sizes.
        #[arg(long, value_delimiter = ',')]
        arity: Option<Vec<u32>>,
        #[arg(long, default_value_t = 3)]
        dmax: u32,
        /// Deterministic key generation (testing only).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encrypt and upload a resource.
    Publish {
        #[command(flatten)]
        who: As,
        #[arg(long)]
        name: String,
        #[arg(long, conflicts_with = "content")]
        file: Option<PathBuf>,
        #[arg(long)]
        content: Option<String>,
        #[arg(long, conflicts_with = "pairs")]
        policy: Option<String>,
        /// Explicit policy pairs, e.g. '0,1/1;1,0/2'.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long, default_value = DEFAULT_CONTENT_TYPE)]
        content_type: String,
    },
    /// Issue a key to a peer and post it to the peer's mailbox.
    Link {
        #[command(flatten)]
        who: As,
        #[arg(long)]
        peer: String,
        #[arg(long, default_value_t = 1)]
        dist: u32,
        /// Peer credentials, e.g. 'team="red", level=4'.
        #[arg(long, conflicts_with = "pattern")]
        creds: Option<String>,
        /// Explicit key pattern, e.g. '0,*'.
        #[arg(long)]
        pattern: Option<String>,
    },
    /// Receive pending keys and forward them along outgoing links.
    Propagate {
        #[command(flatten)]
        who: As,
    },
    /// Revoke a link and rotate every revocable ciphertext.
    Revoke {
        #[command(flatten)]
        who: As,
        #[arg(long)]
        peer: String,
    },
    /// Decrypt a resource to stdout.
    Access {
        #[command(flatten)]
        who: As,
        #[arg(long)]
        owner: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the repository directory on --socket.
    RepoServe,
    /// Measure publish and encrypt scaling.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024])]
        sizes_kib: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16, 32])]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a scenario script.
    Scenario {
        file: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

enum Failure {
    Denied,
    Usage(String),
    Other(String),
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Denied => Failure::Denied,
            NodeError::Policy(_)
            | NodeError::BadDistance { .. }
            | NodeError::EmptyPolicy
            | NodeError::NoUniverse
            | NodeError::Scheme(SchemeError::InvalidSchema(_)) => Failure::Usage(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<RepoError> for Failure {
    fn from(e: RepoError) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

struct Ctx {
    home: PathBuf,
    repo_dir: PathBuf,
    socket: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn repository(&self) -> Result<Arc<dyn Repository>, Failure> {
        Ok(match &self.socket {
            Some(s) => Arc::new(RemoteRepo::new(s)),
            None => Arc::new(RepoStore::open(&self.repo_dir, Limits::default())?),
        })
    }

    fn store_path(&self, user: &str) -> Result<PathBuf, Failure> {
        if user.is_empty() || user.contains(['/', '\\']) || user.starts_with('.') {
            return Err(usage(format!("invalid user id {user:?}")));
        }
        Ok(self.home.join(format!("{user}.json")))
    }

    fn ensure_home(&self) -> Result<(), Failure> {
        DirBuilder::new()
            .recursive(true)
            .mode(0o700)
            .create(&self.home)?;
        Ok(())
    }

    fn load(&self, user: &str) -> Result<Node, Failure> {
        let path = self.store_path(user)?;
        if !path.exists() {
            return Err(Failure::Other(format!(
                "{user} is not enrolled in {}",
                self.home.display()
            )));
        }
        Ok(Node::load(&path, self.repository()?)?)
    }

    fn save(&self, node: &Node) -> Result<(), Failure> {
        Ok(node.save(&self.store_path(node.user_id())?)?)
    }

    fn emit(&self, text: &str, map: BTreeMap<String, String>) {
        match self.format {
            Format::Text => println!("{text}"),
            Format::Map => print!("{}", to_text_map(&map)),
        }
    }
}

fn map<const N: usize>(entries: [(&str, String); N]) -> BTreeMap<String, String> {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn parse_pattern(s: &str) -> Result<Vec<Option<u32>>, Failure> {
    s.split(',')
        .map(|t| match t.trim() {
            "*" => Ok(None),
            t => t
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("bad pattern symbol {t:?}"))),
        })
        .collect()
}

fn parse_pairs(s: &str) -> Result<Vec<PolicyPair>, Failure> {
    s.split(';')
        .map(|p| {
            let bad = || usage(format!("bad pair {p:?}; expected x1,x2,.../d"));
            let (x, d) = p.trim().split_once('/').ok_or_else(bad)?;
            let x = x
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| bad()))
                .collect::<Result<Vec<u32>, _>>()?;
            Ok(PolicyPair::new(x, d.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn profile(
    universe: Option<String>,
    binary: Option<usize>,
    arity: Option<Vec<u32>>,
    d_max: u32,
) -> Result<Profile, Failure> {
    let schema_err = |e: SchemeError| usage(e.to_string());
    Ok(match (universe, binary, arity) {
        (Some(u), _, _) => Profile::Universe(
            ConditionUniverse::parse(&u, d_max).map_err(|e| usage(e.to_string()))?,
        ),
        (None, _, Some(a)) => Profile::Schema(
            AttributeSchema::new(
                a.iter()
                    .enumerate()
                    .map(|(i, &arity)| Dimension {
                        name: format!("dim{}", i + 1),
                        arity,
                    })
                    .collect(),
                d_max,
            )
            .map_err(schema_err)?,
        ),
        (None, n, None) => {
            Profile::Schema(AttributeSchema::binary(n.unwrap_or(1), d_max).map_err(schema_err)?)
        }
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        repo_dir: cli.repo.clone().unwrap_or_else(|| cli.home.join("repo")),
        home: cli.home,
        socket: cli.socket,
        format: cli.format,
    };
    match cli.command {
        Command::Setup => {
            ctx.ensure_home()?;
            if ctx.socket.is_none() {
                RepoStore::open(&ctx.repo_dir, Limits::default())?;
            }
            let group = group_setup(128, None).map_err(|e| Failure::Other(e.to_string()))?;
            ctx.emit(
                &format!("initialized {}", ctx.home.display()),
                map([
                    ("home", ctx.home.display().to_string()),
                    ("repo", ctx.repo_dir.display().to_string()),
                    ("security_level", group.security_level().to_string()),
                ]),
            );
        }
        Command::Enroll {
            who,
            universe,
            binary,
            arity,
            dmax,
            seed,
        } => {
            let path = ctx.store_path(&who.user)?;
            if path.exists() {
                return Err(Failure::Other(
                    NodeError::AlreadyEnrolled(who.user).to_string(),
                ));
            }
            let profile = profile(universe, binary, arity, dmax)?;
            ctx.ensure_home()?;
            let node = Node::enroll(&who.user, profile, ctx.repository()?, seed)?;
            ctx.save(&node)?;
            ctx.emit(
                &format!("enrolled {}", who.user),
                map([
                    ("user_id", who.user.clone()),
                    ("epoch", node.epoch().to_string()),
                    ("d_max", node.d_max().to_string()),
                    ("bit_width", node.schema().bit_width().to_string()),
                ]),
            );
        }
        Command::Publish {
            who,
            name,
            file,
            content,
            policy,
            pairs,
            content_type,
        } => {
            let content = match (file, content) {
                (Some(f), None) => fs::read(f)?,
                (None, Some(c)) => c.into_bytes(),
                _ => return Err(usage("publish needs --file or --content")),
            };
            let labels = match (policy, pairs) {
                (Some(p), None) => Labels::Policy(p),
                (None, Some(p)) => Labels::Pairs(parse_pairs(&p)?),
                _ => return Err(usage("publish needs --policy or --pairs")),
            };
            let mut node = ctx.load(&who.user)?;
            let record = node.publish_with(&name, &content_type, &content, labels)?;
            ctx.save(&node)?;
            ctx.emit(
                &format!(
                    "published {}/{} v{} ({} revocable ciphertexts)",
                    record.owner_id,
                    record.resource_name,
                    record.version,
                    record.revocable_blob_refs.len()
                ),
                record.to_map(),
            );
        }
        Command::Link {
            who,
            peer,
            dist,
            creds,
            pattern,
        } => {
            let grant = match (creds, pattern) {
                (Some(c), None) => {
                    Grant::Credentials(parse_credentials(&c).map_err(|e| usage(e.to_string()))?)
                }
                (None, Some(p)) => Grant::Pattern(parse_pattern(&p)?),
                _ => return Err(usage("link needs --creds or --pattern")),
            };
            let mut node = ctx.load(&who.user)?;
            let out = node.create_link(&peer, grant, dist)?;
            node.send(&out)?;
            ctx.save(&node)?;
            let pattern = format!("{:?}", node.issued()[&peer].pattern());
            ctx.emit(
                &format!(
                    "linked {} -> {peer}, {} key messages sent",
                    who.user,
                    out.len()
                ),
                map([
                    ("peer", peer.clone()),
                    ("distance", dist.to_string()),
                    ("messages", out.len().to_string()),
                    ("pattern", pattern),
                ]),
            );
        }
        Command::Propagate { who } => {
            let mut node = ctx.load(&who.user)?;
            let n = node.process_mailbox()?;
            ctx.save(&node)?;
            ctx.emit(
                &format!("{n} messages processed"),
                map([
                    ("messages", n.to_string()),
                    ("owners", node.key_ring_owners().join(",")),
                ]),
            );
        }
        Command::Revoke { who, peer } => {
            let mut node = ctx.load(&who.user)?;
            let receipt = node.revoke_link(&peer)?;
            ctx.save(&node)?;
            node.send(&receipt.messages)?;
            ctx.save(&node)?;
            ctx.emit(
                &format!(
                    "revoked {peer}; epoch {}, {} resources updated, {} keys refreshed",
                    receipt.new_epoch,
                    receipt.resources_updated,
                    receipt.messages.len()
                ),
                map([
                    ("epoch", receipt.new_epoch.to_string()),
                    ("resources_updated", receipt.resources_updated.to_string()),
                    (
                        "ciphertexts_updated",
                        receipt.ciphertexts_updated.to_string(),
                    ),
                    ("messages", receipt.messages.len().to_string()),
                ]),
            );
        }
        Command::Access {
            who,
            owner,
            name,
            out,
        } => {
            let node = ctx.load(&who.user)?;
            let plaintext = node.access(&owner, &name)?;
            match out {
                Some(p) => fs::write(p, &plaintext)?,
                None => std::io::stdout().write_all(&plaintext)?,
            }
        }
        Command::RepoServe => {
            let socket = ctx
                .socket
                .clone()
                .ok_or_else(|| usage("repo-serve needs --socket"))?;
            let store = RepoStore::open(&ctx.repo_dir, Limits::default())?;
            if socket.exists() {
                fs::remove_file(&socket)?;
            }
            eprintln!("serving {} on {}", ctx.repo_dir.display(), socket.display());
            serve_blocking(&socket, Arc::new(store))?;
        }
        Command::Bench {
            sizes_kib,
            widths,
            reps,
            seed,
        } => {
            let sizes: Vec<usize> = sizes_kib.iter().map(|k| k << 10).collect();
            let report =
                bench_encrypt(&sizes, &widths, reps, seed).map_err(|e| usage(e.to_string()))?;
            match ctx.format {
                Format::Text => {
                    print!("{}", report.table());
                    for a in &report.axes {
                        println!(
                            "# {}: slope {:.3e} s/{}, intercept {:.3e} s, R^2 {:.4}",
                            a.name, a.fit.slope, a.unit, a.fit.intercept, a.fit.r_squared
                        );
                    }
                }
                Format::Map => print!("{}", report.to_text()),
            }
        }
        Command::Scenario { file, seed } => {
            let text = fs::read_to_string(&file)?;
            let script = parse_scenario(&text).map_err(|e| usage(e.to_string()))?;
            let t = run_scenario(&script, seed);
            print!("{t}");
            if !t.passed() {
                return Err(Failure::Other("scenario diverged".into()));
            }
        }
    }
    Ok(())
}

fn is_dir_or_missing(p: &Path) -> bool {
    !p.exists() || p.is_dir()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if !is_dir_or_missing(&cli.home) {
        eprintln!("error: {} is not a directory", cli.home.display());
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Denied) => {
            eprintln!("access denied");
            ExitCode::from(3)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
