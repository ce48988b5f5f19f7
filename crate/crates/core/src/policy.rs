//! Access-policy language.
//!
//! ```text
//! policy := [resource "<-"] rule (";" rule)*
//! rule   := cond ("," cond)*
//! cond   := name pred literal | "dist" "(" "u" "," int ")"
//! name   := ident ["." ident]
//! pred   := "=" | "<=" | "<" | ">" | ">=" | "!=" | "≤" | "≥" | "≠"
//! ```
//!
//! Attribute conditions are compiled against an owner's [`ConditionUniverse`]:
//! position `i` of a ciphertext vector is 1 when the rule requires condition
//! `i`, and a requester's key wildcards every condition they satisfy.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::scheme::{AttributeSchema, KeyPattern, PolicyPair, SchemeError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown predicate {found:?} at {line}:{column}")]
    UnknownPredicate {
        line: usize,
        column: usize,
        found: String,
    },
    #[error("condition {0} is not declared in the universe")]
    Undeclared(String),
    #[error("duplicate condition {0} in universe")]
    DuplicateCondition(String),
    #[error("distance {d} outside 1..={d_max}")]
    BadDistance { d: u32, d_max: u32 },
    #[error("attribute {0} compared against a value of another type")]
    TypeMismatch(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Literal {
    Str(String),
    Int(i64),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(v) => write!(f, "{v}"),
            Literal::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicate {
    Eq,
    Le,
    Lt,
    Gt,
    Ge,
    Ne,
}

impl Predicate {
    pub const ALL: [Predicate; 6] = [
        Predicate::Eq,
        Predicate::Le,
        Predicate::Lt,
        Predicate::Gt,
        Predicate::Ge,
        Predicate::Ne,
    ];

    fn from_symbol(s: &str) -> Option<Self> {
        Some(match s {
            "=" => Predicate::Eq,
            "<=" | "≤" => Predicate::Le,
            "<" => Predicate::Lt,
            ">" => Predicate::Gt,
            ">=" | "≥" => Predicate::Ge,
            "!=" | "≠" => Predicate::Ne,
            _ => return None,
        })
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Predicate::Eq => "=",
            Predicate::Le => "<=",
            Predicate::Lt => "<",
            Predicate::Gt => ">",
            Predicate::Ge => ">=",
            Predicate::Ne => "!=",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, Predicate::Eq | Predicate::Ne)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeCondition {
    pub resource: Option<String>,
    pub attribute: String,
    pub predicate: Predicate,
    pub value: Literal,
}

impl AttributeCondition {
    pub fn new(attribute: &str, predicate: Predicate, value: Literal) -> Self {
        AttributeCondition {
            resource: None,
            attribute: attribute.to_string(),
            predicate,
            value,
        }
    }

    /// The credential key this condition is evaluated against.
    pub fn qualified_name(&self) -> String {
        match &self.resource {
            Some(r) => format!("{r}.{}", self.attribute),
            None => self.attribute.clone(),
        }
    }
}

impl fmt::Display for AttributeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            self.qualified_name(),
            self.predicate.symbol(),
            self.value
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Attribute(AttributeCondition),
    Distance(u32),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Attribute(c) => write!(f, "{c}"),
            Condition::Distance(d) => write!(f, "dist(u,{d})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRule {
    pub conditions: Vec<Condition>,
}

impl AccessRule {
    pub fn attributes(&self) -> impl Iterator<Item = &AttributeCondition> {
        self.conditions.iter().filter_map(|c| match c {
            Condition::Attribute(a) => Some(a),
            Condition::Distance(_) => None,
        })
    }

    /// Smallest distance bound in the rule, if any.
    pub fn distance_bound(&self) -> Option<u32> {
        self.conditions
            .iter()
            .filter_map(|c| match c {
                Condition::Distance(d) => Some(*d),
                Condition::Attribute(_) => None,
            })
            .min()
    }
}

impl fmt::Display for AccessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPolicy {
    pub resource: Option<String>,
    pub rules: Vec<AccessRule>,
}

impl fmt::Display for AccessPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.resource {
            write!(f, "{r} <- ")?;
        }
        for (i, r) in self.rules.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Int(i64),
    Op(String),
    LParen,
    RParen,
    Comma,
    Semi,
    Dot,
    Arrow,
}

#[derive(Debug, Clone)]
struct Spanned {
    token: Token,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> PolicyError {
    PolicyError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn is_op_char(c: char) -> bool {
    matches!(c, '=' | '<' | '>' | '!' | '~' | '≤' | '≥' | '≠')
}

fn lex(text: &str) -> Result<(Vec<Spanned>, (usize, usize)), PolicyError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut column) = (1, 1);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (l, col) = (line, column);
        let advance = |n: usize, line: &mut usize, column: &mut usize, i: &mut usize| {
            for k in 0..n {
                if chars[*i + k] == '\n' {
                    *line += 1;
                    *column = 1;
                } else {
                    *column += 1;
                }
            }
            *i += n;
        };
        if c.is_whitespace() {
            advance(1, &mut line, &mut column, &mut i);
            continue;
        }
        let token = if c.is_alphabetic() || c == '_' {
            let start = i;
            let mut j = i;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let s: String = chars[start..j].iter().collect();
            advance(j - i, &mut line, &mut column, &mut i);
            Token::Ident(s)
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            let s: String = chars[i..j].iter().collect();
            let v = s
                .parse::<i64>()
                .map_err(|_| syntax(l, col, "integer out of range"))?;
            advance(j - i, &mut line, &mut column, &mut i);
            Token::Int(v)
        } else if c == '"' {
            let mut s = String::new();
            let mut j = i + 1;
            loop {
                match chars.get(j) {
                    None => return Err(syntax(l, col, "unterminated string")),
                    Some('"') => break,
                    Some('\\') => match chars.get(j + 1) {
                        Some(e @ ('"' | '\\')) => {
                            s.push(*e);
                            j += 2;
                        }
                        _ => return Err(syntax(l, col, "bad escape in string")),
                    },
                    Some(ch) => {
                        s.push(*ch);
                        j += 1;
                    }
                }
            }
            advance(j + 1 - i, &mut line, &mut column, &mut i);
            Token::Str(s)
        } else if c == '<'
            && chars.get(i + 1) == Some(&'-')
            && !chars.get(i + 2).is_some_and(|d| d.is_ascii_digit())
        {
            advance(2, &mut line, &mut column, &mut i);
            Token::Arrow
        } else if is_op_char(c) {
            let mut j = i;
            while j < chars.len() && is_op_char(chars[j]) {
                j += 1;
            }
            let s: String = chars[i..j].iter().collect();
            advance(j - i, &mut line, &mut column, &mut i);
            Token::Op(s)
        } else {
            let t = match c {
                '(' => Token::LParen,
                ')' => Token::RParen,
                ',' => Token::Comma,
                ';' => Token::Semi,
                '.' => Token::Dot,
                _ => return Err(syntax(l, col, format!("unexpected character {c:?}"))),
            };
            advance(1, &mut line, &mut column, &mut i);
            t
        };
        out.push(Spanned {
            token,
            line: l,
            column: col,
        });
    }
    Ok((out, (line, column)))
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn new(text: &str) -> Result<Self, PolicyError> {
        let (tokens, end) = lex(text)?;
        Ok(Parser {
            tokens,
            pos: 0,
            end,
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|s| &s.token)
    }

    fn location(&self) -> (usize, usize) {
        self.tokens
            .get(self.pos)
            .map(|s| (s.line, s.column))
            .unwrap_or(self.end)
    }

    fn error(&self, message: &str) -> PolicyError {
        let (line, column) = self.location();
        let found = match self.peek() {
            None => "end of input".to_string(),
            Some(t) => format!("{t:?}"),
        };
        syntax(line, column, format!("{message}, found {found}"))
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|s| s.token.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), PolicyError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected {what}")))
        }
    }

    fn ident(&mut self) -> Result<String, PolicyError> {
        match self.peek() {
            Some(Token::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.error("expected a name")),
        }
    }

    fn policy(&mut self) -> Result<AccessPolicy, PolicyError> {
        let resource = match (self.tokens.get(self.pos), self.tokens.get(self.pos + 1)) {
            (
                Some(Spanned {
                    token: Token::Ident(r),
                    ..
                }),
                Some(Spanned {
                    token: Token::Arrow,
                    ..
                }),
            ) => {
                let r = r.clone();
                self.pos += 2;
                Some(r)
            }
            _ => None,
        };
        let mut rules = vec![self.rule()?];
        while self.peek() == Some(&Token::Semi) {
            self.pos += 1;
            rules.push(self.rule()?);
        }
        if self.peek().is_some() {
            return Err(self.error("expected ';' or ','"));
        }
        Ok(AccessPolicy { resource, rules })
    }

    fn rule(&mut self) -> Result<AccessRule, PolicyError> {
        let mut conditions = vec![self.condition()?];
        while self.peek() == Some(&Token::Comma) {
            self.pos += 1;
            conditions.push(self.condition()?);
        }
        Ok(AccessRule { conditions })
    }

    fn condition(&mut self) -> Result<Condition, PolicyError> {
        let name = self.ident()?;
        if name == "dist" && self.peek() == Some(&Token::LParen) {
            self.pos += 1;
            if self.ident()? != "u" {
                self.pos -= 1;
                return Err(self.error("expected 'u'"));
            }
            self.expect(Token::Comma, "','")?;
            let d = match self.peek() {
                Some(Token::Int(v)) if *v >= 1 && *v <= u32::MAX as i64 => *v as u32,
                _ => return Err(self.error("expected a positive distance")),
            };
            self.pos += 1;
            self.expect(Token::RParen, "')'")?;
            return Ok(Condition::Distance(d));
        }
        let (resource, attribute) = if self.peek() == Some(&Token::Dot) {
            self.pos += 1;
            (Some(name), self.ident()?)
        } else {
            (None, name)
        };
        let (line, column) = self.location();
        let predicate = match self.peek() {
            Some(Token::Op(op)) => {
                Predicate::from_symbol(op).ok_or_else(|| PolicyError::UnknownPredicate {
                    line,
                    column,
                    found: op.clone(),
                })?
            }
            Some(Token::Arrow) => {
                return Err(PolicyError::UnknownPredicate {
                    line,
                    column,
                    found: "<-".into(),
                })
            }
            _ => return Err(self.error("expected a predicate")),
        };
        self.pos += 1;
        let (vline, vcolumn) = self.location();
        let value = match self.next() {
            Some(Token::Str(s)) => Literal::Str(s),
            Some(Token::Int(v)) => Literal::Int(v),
            _ => {
                self.pos -= 1;
                return Err(self.error("expected a string or integer literal"));
            }
        };
        if predicate.is_ordering() && matches!(value, Literal::Str(_)) {
            return Err(syntax(
                vline,
                vcolumn,
                format!("predicate {} needs an integer literal", predicate.symbol()),
            ));
        }
        Ok(Condition::Attribute(AttributeCondition {
            resource,
            attribute,
            predicate,
            value,
        }))
    }
}

pub fn parse_policy(text: &str) -> Result<AccessPolicy, PolicyError> {
    Parser::new(text)?.policy()
}

/// Requester credentials; keys are attribute names, optionally `resource.attr`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CredentialSet(pub BTreeMap<String, Literal>);

impl CredentialSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Literal) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Literal> {
        self.0.get(name)
    }
}

impl fmt::Display for CredentialSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Parses `name=literal ("," name=literal)*`. The empty string is the empty set.
pub fn parse_credentials(text: &str) -> Result<CredentialSet, PolicyError> {
    let mut p = Parser::new(text)?;
    let mut creds = CredentialSet::new();
    if p.peek().is_none() {
        return Ok(creds);
    }
    loop {
        let mut name = p.ident()?;
        if p.peek() == Some(&Token::Dot) {
            p.pos += 1;
            name = format!("{name}.{}", p.ident()?);
        }
        p.expect(Token::Op("=".into()), "'='")?;
        let value = match p.next() {
            Some(Token::Str(s)) => Literal::Str(s),
            Some(Token::Int(v)) => Literal::Int(v),
            _ => {
                p.pos -= 1;
                return Err(p.error("expected a literal"));
            }
        };
        creds.0.insert(name, value);
        match p.next() {
            None => return Ok(creds),
            Some(Token::Comma) => {}
            Some(_) => {
                p.pos -= 1;
                return Err(p.error("expected ','"));
            }
        }
    }
}

pub fn evaluate_condition(
    c: &AttributeCondition,
    creds: &CredentialSet,
) -> Result<bool, PolicyError> {
    let Some(have) = creds.get(&c.qualified_name()) else {
        return Ok(false);
    };
    let ord = match (have, &c.value) {
        (Literal::Int(a), Literal::Int(b)) => a.cmp(b),
        (Literal::Str(a), Literal::Str(b)) if !c.predicate.is_ordering() => a.cmp(b),
        _ => return Err(PolicyError::TypeMismatch(c.qualified_name())),
    };
    Ok(match c.predicate {
        Predicate::Eq => ord.is_eq(),
        Predicate::Ne => ord.is_ne(),
        Predicate::Lt => ord.is_lt(),
        Predicate::Le => ord.is_le(),
        Predicate::Gt => ord.is_gt(),
        Predicate::Ge => ord.is_ge(),
    })
}

/// An owner's ordered, fixed list of declared conditions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionUniverse {
    conditions: Vec<AttributeCondition>,
    d_max: u32,
}

impl ConditionUniverse {
    pub fn new(conditions: Vec<AttributeCondition>, d_max: u32) -> Result<Self, PolicyError> {
        let mut seen = HashSet::new();
        for c in &conditions {
            if !seen.insert(c) {
                return Err(PolicyError::DuplicateCondition(c.to_string()));
            }
        }
        let u = ConditionUniverse { conditions, d_max };
        u.schema()?;
        Ok(u)
    }

    /// Parses one condition per `;`- or `,`-separated item.
    pub fn parse(text: &str, d_max: u32) -> Result<Self, PolicyError> {
        let policy = parse_policy(text)?;
        let mut conditions = Vec::new();
        for rule in policy.rules {
            for c in rule.conditions {
                match c {
                    Condition::Attribute(a) => conditions.push(a),
                    Condition::Distance(_) => {
                        return Err(syntax(1, 1, "a universe lists attribute conditions only"))
                    }
                }
            }
        }
        Self::new(conditions, d_max)
    }

    pub fn conditions(&self) -> &[AttributeCondition] {
        &self.conditions
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn d_max(&self) -> u32 {
        self.d_max
    }

    pub fn position(&self, c: &AttributeCondition) -> Option<usize> {
        self.conditions.iter().position(|x| x == c)
    }

    /// One binary dimension per condition.
    pub fn schema(&self) -> Result<AttributeSchema, PolicyError> {
        Ok(AttributeSchema::binary(self.conditions.len(), self.d_max)?)
    }

    fn check_distance(&self, d: u32) -> Result<(), PolicyError> {
        if d < 1 || d > self.d_max {
            return Err(PolicyError::BadDistance {
                d,
                d_max: self.d_max,
            });
        }
        Ok(())
    }

    /// Which conditions the credentials satisfy.
    pub fn satisfied(&self, creds: &CredentialSet) -> Result<Vec<bool>, PolicyError> {
        self.conditions
            .iter()
            .map(|c| evaluate_condition(c, creds))
            .collect()
    }
}

impl fmt::Display for ConditionUniverse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// The policy pair for a single rule.
pub fn compile_rule(rule: &AccessRule, u: &ConditionUniverse) -> Result<PolicyPair, PolicyError> {
    let mut x = vec![0u32; u.len()];
    for a in rule.attributes() {
        let i = u
            .position(a)
            .ok_or_else(|| PolicyError::Undeclared(a.to_string()))?;
        x[i] = 1;
    }
    let d = rule.distance_bound().unwrap_or(u.d_max);
    u.check_distance(d)?;
    Ok(PolicyPair::new(x, d))
}

/// One policy pair per rule, in rule order.
pub fn compile_policy(
    p: &AccessPolicy,
    u: &ConditionUniverse,
) -> Result<Vec<PolicyPair>, PolicyError> {
    p.rules.iter().map(|r| compile_rule(r, u)).collect()
}

pub fn pattern_from_satisfied(satisfied: &[bool], d: u32) -> KeyPattern {
    KeyPattern::new(
        satisfied
            .iter()
            .map(|&s| if s { None } else { Some(0) })
            .collect(),
        d,
    )
}

pub fn derive_key_pattern(
    creds: &CredentialSet,
    u: &ConditionUniverse,
    d: u32,
) -> Result<KeyPattern, PolicyError> {
    u.check_distance(d)?;
    Ok(pattern_from_satisfied(&u.satisfied(creds)?, d))
}

/// Direct semantics: some rule has every attribute condition satisfied and a
/// distance bound of at least `d`.
pub fn policy_grants(
    p: &AccessPolicy,
    creds: &CredentialSet,
    d: u32,
    d_max: u32,
) -> Result<bool, PolicyError> {
    for rule in &p.rules {
        let mut ok = d <= rule.distance_bound().unwrap_or(d_max);
        for a in rule.attributes() {
            ok &= evaluate_condition(a, creds)?;
        }
        if ok {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &str) -> Literal {
        Literal::Str(v.into())
    }

    fn announcement_universe() -> ConditionUniverse {
        ConditionUniverse::new(
            vec![
                AttributeCondition::new("FriendType", Predicate::Eq, s("music club")),
                AttributeCondition::new("FriendType", Predicate::Eq, s("college")),
            ],
            3,
        )
        .unwrap()
    }

    const ANNOUNCEMENT: &str =
        r#"FriendType="music club", dist(u,2); FriendType="college", dist(u,1)"#;

    #[test]
    fn parses_announcement_policy() {
        let p = parse_policy(ANNOUNCEMENT).unwrap();
        assert_eq!(p.rules.len(), 2);
        assert_eq!(p.rules[0].distance_bound(), Some(2));
        assert_eq!(p.rules[1].distance_bound(), Some(1));
        assert_eq!(p.to_string(), ANNOUNCEMENT);
    }

    #[test]
    fn parses_simple_forms() {
        let p = parse_policy("age>=18").unwrap();
        assert_eq!(p.rules.len(), 1);
        assert_eq!(p.rules[0].conditions.len(), 1);
        assert_eq!(p.rules[0].distance_bound(), None);
        assert_eq!(parse_policy("age ≥ 18").unwrap(), p);
        let q = parse_policy(" doc <- \n photo.owner = \"bob\" ,dist ( u , 3 ) ").unwrap();
        assert_eq!(q.resource.as_deref(), Some("doc"));
        assert_eq!(q.to_string(), r#"doc <- photo.owner="bob", dist(u,3)"#);
    }

    #[test]
    fn syntax_errors_carry_locations() {
        assert!(matches!(
            parse_policy("dist(u,)"),
            Err(PolicyError::Syntax {
                line: 1,
                column: 8,
                ..
            })
        ));
        assert!(matches!(
            parse_policy("a=1;\n  b=>2"),
            Err(PolicyError::UnknownPredicate {
                line: 2,
                column: 4,
                ..
            })
        ));
        assert!(matches!(
            parse_policy("a==1"),
            Err(PolicyError::UnknownPredicate { .. })
        ));
        assert!(matches!(parse_policy(""), Err(PolicyError::Syntax { .. })));
        assert!(matches!(
            parse_policy("a=1,"),
            Err(PolicyError::Syntax { .. })
        ));
        assert!(matches!(
            parse_policy("a=\"x"),
            Err(PolicyError::Syntax { .. })
        ));
        assert!(matches!(
            parse_policy("dist(v,1)"),
            Err(PolicyError::Syntax { .. })
        ));
        assert!(matches!(
            parse_policy("dist(u,0)"),
            Err(PolicyError::Syntax { .. })
        ));
        assert!(matches!(
            parse_policy("name<\"bob\""),
            Err(PolicyError::Syntax {
                line: 1,
                column: 6,
                ..
            })
        ));
    }

    #[test]
    fn condition_evaluation() {
        let music = AttributeCondition::new("FriendType", Predicate::Eq, s("music club"));
        let adult = AttributeCondition::new("age", Predicate::Ge, Literal::Int(18));
        let creds = CredentialSet::new().with("FriendType", s("music club"));
        assert!(evaluate_condition(&music, &creds).unwrap());
        assert!(
            !evaluate_condition(&adult, &CredentialSet::new().with("age", Literal::Int(17)))
                .unwrap()
        );
        assert!(!evaluate_condition(&adult, &CredentialSet::new()).unwrap());
        assert_eq!(
            evaluate_condition(&adult, &CredentialSet::new().with("age", s("old"))),
            Err(PolicyError::TypeMismatch("age".into()))
        );
        let cases = [
            (Predicate::Eq, [false, true, false]),
            (Predicate::Le, [true, true, false]),
            (Predicate::Lt, [true, false, false]),
            (Predicate::Gt, [false, false, true]),
            (Predicate::Ge, [false, true, true]),
            (Predicate::Ne, [true, false, true]),
        ];
        for (pred, want) in cases {
            let c = AttributeCondition::new("n", pred, Literal::Int(5));
            for (v, w) in [4, 5, 6].into_iter().zip(want) {
                let creds = CredentialSet::new().with("n", Literal::Int(v));
                assert_eq!(evaluate_condition(&c, &creds).unwrap(), w, "{c} with {v}");
            }
        }
    }

    #[test]
    fn compile_announcement() {
        let p = parse_policy(ANNOUNCEMENT).unwrap();
        let pairs = compile_policy(&p, &announcement_universe()).unwrap();
        assert_eq!(
            pairs,
            vec![
                PolicyPair::new(vec![1, 0], 2),
                PolicyPair::new(vec![0, 1], 1)
            ]
        );
        let bare = parse_policy(r#"FriendType="college""#).unwrap();
        assert_eq!(
            compile_policy(&bare, &announcement_universe()).unwrap()[0].d,
            3
        );
        let rogue = parse_policy(r#"FriendType="coworker""#).unwrap();
        assert!(matches!(
            compile_policy(&rogue, &announcement_universe()),
            Err(PolicyError::Undeclared(_))
        ));
        let far = parse_policy(r#"FriendType="college", dist(u,4)"#).unwrap();
        assert!(matches!(
            compile_policy(&far, &announcement_universe()),
            Err(PolicyError::BadDistance { d: 4, d_max: 3 })
        ));
        let tight = parse_policy(r#"dist(u,3), FriendType="college", dist(u,2)"#).unwrap();
        assert_eq!(
            compile_policy(&tight, &announcement_universe()).unwrap()[0].d,
            2
        );
    }

    #[test]
    fn key_patterns_from_credentials() {
        let u = announcement_universe();
        let music = CredentialSet::new().with("FriendType", s("music club"));
        assert_eq!(
            derive_key_pattern(&music, &u, 1).unwrap(),
            KeyPattern::new(vec![None, Some(0)], 1)
        );
        assert_eq!(
            derive_key_pattern(&CredentialSet::new(), &u, 2).unwrap(),
            KeyPattern::new(vec![Some(0), Some(0)], 2)
        );
        assert!(matches!(
            derive_key_pattern(&music, &u, 0),
            Err(PolicyError::BadDistance { .. })
        ));
    }

    #[test]
    fn pattern_law_over_rule_subsets() {
        // Brute force over all 4 rule subsets of a 2-condition universe for a
        // requester who satisfies only the first condition.
        let u = announcement_universe();
        let schema = u.schema().unwrap();
        let creds = CredentialSet::new().with("FriendType", s("music club"));
        let k = derive_key_pattern(&creds, &u, 1).unwrap();
        let mut granted = Vec::new();
        for x in [[0, 0], [1, 0], [0, 1], [1, 1]] {
            let ok =
                crate::scheme::match_oracle(&schema, &PolicyPair::new(x.to_vec(), 1), &k).unwrap();
            granted.push(ok);
        }
        assert_eq!(granted, [true, true, false, false]);
    }

    #[test]
    fn universe_rejects_duplicates() {
        let c = AttributeCondition::new("a", Predicate::Eq, Literal::Int(1));
        assert!(matches!(
            ConditionUniverse::new(vec![c.clone(), c], 2),
            Err(PolicyError::DuplicateCondition(_))
        ));
        let u = ConditionUniverse::parse(r#"FriendType="music club"; FriendType="college""#, 3)
            .unwrap();
        assert_eq!(u, announcement_universe());
    }

    #[test]
    fn credentials_parse() {
        let c = parse_credentials(r#"FriendType="music club", age=17"#).unwrap();
        assert_eq!(c.get("age"), Some(&Literal::Int(17)));
        assert_eq!(parse_credentials("").unwrap(), CredentialSet::new());
        assert_eq!(parse_credentials(&c.to_string()).unwrap(), c);
        assert!(parse_credentials("age>17").is_err());
    }

    #[test]
    fn semantic_oracle_matches_announcement() {
        let p = parse_policy(ANNOUNCEMENT).unwrap();
        let music = CredentialSet::new().with("FriendType", s("music club"));
        let college = CredentialSet::new().with("FriendType", s("college"));
        let coworker = CredentialSet::new().with("FriendType", s("coworker"));
        assert!(policy_grants(&p, &music, 1, 3).unwrap());
        assert!(policy_grants(&p, &music, 2, 3).unwrap());
        assert!(!policy_grants(&p, &music, 3, 3).unwrap());
        assert!(policy_grants(&p, &college, 1, 3).unwrap());
        assert!(!policy_grants(&p, &college, 2, 3).unwrap());
        assert!(!policy_grants(&p, &coworker, 1, 3).unwrap());
    }

    fn arb_literal() -> impl Strategy<Value = Literal> {
        prop_oneof![
            any::<i64>().prop_map(Literal::Int),
            "[ -~]{0,10}".prop_map(Literal::Str),
        ]
    }

    fn arb_condition() -> impl Strategy<Value = Condition> {
        let ident = "[A-Za-z_][A-Za-z0-9_]{0,6}".prop_filter("reserved", |s| s != "dist");
        let attr = (
            proptest::option::of(ident.clone()),
            ident,
            proptest::sample::select(Predicate::ALL.to_vec()),
            arb_literal(),
        )
            .prop_map(|(resource, attribute, predicate, value)| {
                let value = match value {
                    Literal::Str(_) if predicate.is_ordering() => Literal::Int(0),
                    v => v,
                };
                Condition::Attribute(AttributeCondition {
                    resource,
                    attribute,
                    predicate,
                    value,
                })
            });
        prop_oneof![4 => attr, 1 => (1u32..100).prop_map(Condition::Distance)]
    }

    fn arb_policy() -> impl Strategy<Value = AccessPolicy> {
        (
            proptest::option::of("[a-z][a-z0-9_]{0,6}".prop_filter("reserved", |s| s != "dist")),
            proptest::collection::vec(
                proptest::collection::vec(arb_condition(), 1..4)
                    .prop_map(|conditions| AccessRule { conditions }),
                1..4,
            ),
        )
            .prop_map(|(resource, rules)| AccessPolicy { resource, rules })
    }

    proptest! {
        #[test]
        fn printer_round_trips(p in arb_policy()) {
            let text = p.to_string();
            prop_assert_eq!(parse_policy(&text).unwrap(), p);
        }

        #[test]
        fn parser_never_panics(text in "[ -~]{0,40}") {
            let _ = parse_policy(&text);
        }
    }
}
