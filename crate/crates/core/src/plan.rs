//! Declarative plan files and their expansion into concrete jobs.
//!
//! The grammar is line oriented. `#` starts a comment.
//!
//! ```text
//! parameter <name> [<label>] range from <lo> to <hi> step <s>
//! parameter <name> [<label>] select anyof <v1> <v2> ...
//! parameter <name> [<label>] single <v>
//! task main
//!     <staging directive> ...
//!     execute <template>
//! endtask
//! ```
//!
//! Templates reference parameters as `$name`; `$$` is a literal `$`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum PlanError {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}:{column}: undeclared parameter `{name}`")]
    UndeclaredParameter {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: duplicate parameter `{name}`")]
    DuplicateParameter {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("no binding for `${0}`")]
    MissingBinding(String),
    #[error("parameter `{0}` has an empty domain")]
    EmptyDomain(String),
}

/// A parameter value. Integral numbers print without a fractional part.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl Value {
    fn from_literal(token: &str) -> Value {
        match token.parse::<f64>() {
            Ok(n) if n.is_finite() => Value::Number(n),
            _ => Value::Text(token.to_string()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Number(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    write!(f, "{}", *n as i64)
                } else {
                    // Trim binary noise such as 0.30000000000000004.
                    let rounded = (n * 1e10).round() / 1e10;
                    write!(f, "{rounded}")
                }
            }
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => s.serialize_i64(*n as i64),
            Value::Number(n) => s.serialize_f64(*n),
            Value::Text(t) => s.serialize_str(t),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Number(n) => Value::Number(n),
            Raw::Text(t) => Value::Text(t),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Range { lo: f64, hi: f64, step: f64 },
    Select(Vec<Value>),
    Single(Value),
}

impl Domain {
    pub fn cardinality(&self) -> usize {
        match self {
            Domain::Range { lo, hi, step } => ((hi - lo) / step + 1e-9).floor() as usize + 1,
            Domain::Select(values) => values.len(),
            Domain::Single(_) => 1,
        }
    }

    pub fn values(&self) -> Vec<Value> {
        match self {
            Domain::Range { lo, step, .. } => (0..self.cardinality())
                .map(|k| Value::Number(lo + k as f64 * step))
                .collect(),
            Domain::Select(values) => values.clone(),
            Domain::Single(v) => vec![v.clone()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    pub label: Option<String>,
    pub domain: Domain,
}

/// A staging directive inside the task block. Recorded but not executed by the
/// simulated fabric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub line: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub directives: Vec<Directive>,
    pub execute: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanModel {
    pub parameters: Vec<ParameterDef>,
    pub task: TaskDef,
}

/// One point of the parameter space with its substituted command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub binding: Vec<(String, Value)>,
    pub command: String,
}

impl JobSpec {
    pub fn literal(command: impl Into<String>) -> Self {
        JobSpec {
            binding: Vec::new(),
            command: command.into(),
        }
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

/// Splits a line into whitespace separated tokens; double quotes group words.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<Token<'_>>, PlanError> {
    let mut tokens = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if bytes[i] == b'#' {
            break;
        }
        if bytes[i] == b'"' {
            let start = i + 1;
            let end = line[start..].find('"').map(|p| start + p).ok_or(PlanError::Syntax {
                line: line_no,
                column: i + 1,
                message: "unterminated string".into(),
            })?;
            tokens.push(Token {
                text: &line[start..end],
                column: i + 1,
            });
            i = end + 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        tokens.push(Token {
            text: &line[start..i],
            column: start + 1,
        });
    }
    Ok(tokens)
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// `$name` occurrences in a template, with their byte offsets.
pub fn placeholders(template: &str) -> Vec<(String, usize)> {
    let bytes = template.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'$' {
            i += 1;
            continue;
        }
        if bytes.get(i + 1) == Some(&b'$') {
            i += 2;
            continue;
        }
        let start = i + 1;
        let mut end = start;
        while end < bytes.len()
            && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_')
        {
            end += 1;
        }
        if end > start && is_name(&template[start..end]) {
            found.push((template[start..end].to_string(), i));
        }
        i = end.max(start);
    }
    found
}

/// Replaces every `$name` with its bound value's canonical text.
pub fn substitute(template: &str, binding: &BTreeMap<&str, &Value>) -> Result<String, PlanError> {
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    let mut literal_from = 0;
    while i < bytes.len() {
        if bytes[i] != b'$' {
            i += 1;
            continue;
        }
        out.push_str(&template[literal_from..i]);
        if bytes.get(i + 1) == Some(&b'$') {
            out.push('$');
            i += 2;
            literal_from = i;
            continue;
        }
        let start = i + 1;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        let name = &template[start..end];
        if end > start && is_name(name) {
            let value = binding
                .get(name)
                .ok_or_else(|| PlanError::MissingBinding(name.to_string()))?;
            out.push_str(&value.to_string());
            i = end;
        } else {
            out.push('$');
            i = start;
        }
        literal_from = i;
    }
    out.push_str(&template[literal_from..]);
    Ok(out)
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> PlanError {
    PlanError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn number(tok: &Token<'_>, line: usize) -> Result<f64, PlanError> {
    tok.text
        .parse::<f64>()
        .ok()
        .filter(|n| n.is_finite())
        .ok_or_else(|| syntax(line, tok.column, format!("expected a number, found `{}`", tok.text)))
}

fn expect(tokens: &[Token<'_>], idx: usize, word: &str, line: usize, eol: usize) -> Result<(), PlanError> {
    match tokens.get(idx) {
        Some(t) if t.text == word => Ok(()),
        Some(t) => Err(syntax(line, t.column, format!("expected `{word}`, found `{}`", t.text))),
        None => Err(syntax(line, eol, format!("expected `{word}`"))),
    }
}

fn parse_parameter(tokens: &[Token<'_>], line: usize, eol: usize) -> Result<ParameterDef, PlanError> {
    let name_tok = tokens.get(1).ok_or_else(|| syntax(line, eol, "expected parameter name"))?;
    if !is_name(name_tok.text) {
        return Err(syntax(line, name_tok.column, format!("invalid parameter name `{}`", name_tok.text)));
    }
    let is_kind = |t: &Token<'_>| matches!(t.text, "range" | "select" | "single");
    let mut idx = 2;
    let mut label = None;
    if let Some(t) = tokens.get(idx) {
        if !is_kind(t) {
            label = Some(t.text.to_string());
            idx += 1;
        }
    }
    let kind = tokens
        .get(idx)
        .ok_or_else(|| syntax(line, eol, "expected `range`, `select` or `single`"))?;
    let domain = match kind.text {
        "range" => {
            expect(tokens, idx + 1, "from", line, eol)?;
            expect(tokens, idx + 3, "to", line, eol)?;
            expect(tokens, idx + 5, "step", line, eol)?;
            let get = |i: usize| tokens.get(i).ok_or_else(|| syntax(line, eol, "incomplete range"));
            let lo = number(get(idx + 2)?, line)?;
            let hi = number(get(idx + 4)?, line)?;
            let step_tok = get(idx + 6)?;
            let step = number(step_tok, line)?;
            if step <= 0.0 {
                return Err(syntax(line, step_tok.column, "step must be positive"));
            }
            if lo > hi {
                return Err(syntax(line, kind.column, "range lower bound exceeds upper bound"));
            }
            if let Some(extra) = tokens.get(idx + 7) {
                return Err(syntax(line, extra.column, "unexpected trailing input"));
            }
            Domain::Range { lo, hi, step }
        }
        "select" => {
            expect(tokens, idx + 1, "anyof", line, eol)?;
            let values: Vec<Value> = tokens[idx + 2..]
                .iter()
                .map(|t| Value::from_literal(t.text))
                .collect();
            if values.is_empty() {
                return Err(syntax(line, eol, "select needs at least one value"));
            }
            Domain::Select(values)
        }
        "single" => {
            let v = tokens.get(idx + 1).ok_or_else(|| syntax(line, eol, "single needs a value"))?;
            if let Some(extra) = tokens.get(idx + 2) {
                return Err(syntax(line, extra.column, "unexpected trailing input"));
            }
            Domain::Single(Value::from_literal(v.text))
        }
        other => {
            return Err(syntax(
                line,
                kind.column,
                format!("expected `range`, `select` or `single`, found `{other}`"),
            ))
        }
    };
    Ok(ParameterDef {
        name: name_tok.text.to_string(),
        label,
        domain,
    })
}

/// Text following the first token, with the comment stripped.
fn rest_after_keyword(raw: &str, keyword_col: usize, keyword: &str) -> String {
    let after = &raw[keyword_col - 1 + keyword.len()..];
    let after = match after.find(" #") {
        Some(p) => &after[..p],
        None => after,
    };
    after.trim().to_string()
}

pub fn parse_plan(text: &str) -> Result<PlanModel, PlanError> {
    let mut parameters: Vec<ParameterDef> = Vec::new();
    let mut seen = HashSet::new();
    let mut task: Option<TaskDef> = None;
    let mut in_task: Option<(TaskDef, bool)> = None;
    // (template, line, column of template start) for placeholder checks
    let mut templates: Vec<(String, usize, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens = tokenize(raw, line)?;
        let Some(first) = tokens.first() else { continue };
        let eol = raw.trim_end().len() + 1;

        if let Some((ref mut def, ref mut has_exec)) = in_task {
            match first.text {
                "endtask" => {
                    if !*has_exec {
                        return Err(syntax(line, first.column, "task has no `execute` line"));
                    }
                    let (def, _) = in_task.take().unwrap();
                    task = Some(def);
                }
                "execute" => {
                    if *has_exec {
                        return Err(syntax(line, first.column, "task has more than one `execute` line"));
                    }
                    let template = rest_after_keyword(raw, first.column, "execute");
                    if template.is_empty() {
                        return Err(syntax(line, eol, "`execute` needs a command"));
                    }
                    templates.push((template.clone(), line, first.column + "execute".len() + 1));
                    def.execute = template;
                    *has_exec = true;
                }
                "task" | "parameter" => {
                    return Err(syntax(line, first.column, format!("`{}` inside task block", first.text)));
                }
                _ => {
                    let text = raw[first.column - 1..].trim_end().to_string();
                    templates.push((text.clone(), line, first.column));
                    def.directives.push(Directive { line, text });
                }
            }
            continue;
        }

        match first.text {
            "parameter" => {
                if task.is_some() {
                    return Err(syntax(line, first.column, "parameter after task block"));
                }
                let def = parse_parameter(&tokens, line, eol)?;
                if !seen.insert(def.name.clone()) {
                    return Err(PlanError::DuplicateParameter {
                        name: def.name,
                        line,
                        column: tokens[1].column,
                    });
                }
                parameters.push(def);
            }
            "task" => {
                if task.is_some() {
                    return Err(syntax(line, first.column, "only one task block is allowed"));
                }
                let name = tokens.get(1).ok_or_else(|| syntax(line, eol, "expected task name"))?;
                if name.text != "main" {
                    return Err(syntax(line, name.column, "the task must be named `main`"));
                }
                in_task = Some((
                    TaskDef {
                        name: "main".into(),
                        directives: Vec::new(),
                        execute: String::new(),
                    },
                    false,
                ));
            }
            other => {
                return Err(syntax(line, first.column, format!("unexpected `{other}`")));
            }
        }
    }

    if in_task.is_some() {
        let last = text.lines().count().max(1);
        return Err(syntax(last, 1, "missing `endtask`"));
    }
    let task = task.ok_or_else(|| syntax(text.lines().count().max(1), 1, "missing `task main` block"))?;

    for (template, line, col) in &templates {
        for (name, offset) in placeholders(template) {
            if !seen.contains(&name) {
                return Err(PlanError::UndeclaredParameter {
                    name,
                    line: *line,
                    column: col + offset,
                });
            }
        }
    }

    Ok(PlanModel { parameters, task })
}

/// Cartesian product of all parameter domains. The first declared parameter
/// varies slowest.
pub fn expand_jobs(plan: &PlanModel) -> Result<Vec<JobSpec>, PlanError> {
    let domains: Vec<(String, Vec<Value>)> = plan
        .parameters
        .iter()
        .map(|p| (p.name.clone(), p.domain.values()))
        .collect();
    if let Some((name, _)) = domains.iter().find(|(_, v)| v.is_empty()) {
        return Err(PlanError::EmptyDomain(name.clone()));
    }

    let total: usize = domains.iter().map(|(_, v)| v.len()).product();
    let mut jobs = Vec::with_capacity(total);
    let mut odometer = vec![0usize; domains.len()];
    for _ in 0..total {
        let binding: Vec<(String, Value)> = domains
            .iter()
            .zip(&odometer)
            .map(|((name, values), &i)| (name.clone(), values[i].clone()))
            .collect();
        let lookup: BTreeMap<&str, &Value> = binding.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let command = substitute(&plan.task.execute, &lookup)?;
        jobs.push(JobSpec { binding, command });

        for pos in (0..odometer.len()).rev() {
            odometer[pos] += 1;
            if odometer[pos] < domains[pos].1.len() {
                break;
            }
            odometer[pos] = 0;
        }
    }
    Ok(jobs)
}
