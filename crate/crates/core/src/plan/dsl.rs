//! Plan documents.
//!
//! The canonical form is JSON:
//!
//! ```json
//! {
//!   "operators": [
//!     {"id": "s", "kind": "TableScan", "est_out_rows": 1000000.0, "row_bytes": 100.0,
//!      "children": [], "table": "T"}
//!   ],
//!   "root": "s"
//! }
//! ```
//!
//! A shorthand is accepted as well and desugars to the same structure:
//!
//! ```text
//! agg(join(scan(A, rows=1e5), scan(B, rows=1e6), out=2e6, keys=[A.id, B.a_id]), out=100)
//! ```
//!
//! Node forms: `scan(T, rows=..)`, `mvscan(V, rows=..)`, `filter(c, out=..)`,
//! `project(c)`, `build(c)`, `probe(build_side, probe_side, out=..)`,
//! `join(l, r, ..)` (= `probe(build(l), r, ..)`), `agg(c, out=..)`, `sort(c)`,
//! `exchange(c)`, `union(c1, c2, ..)`. Every node also takes `id=`, `bytes=`
//! and `keys=[..]`. `#` starts a comment.

use serde::{Deserialize, Serialize};

use super::{OperatorKind, OperatorNode, PlanDAG, PlanError};

/// Serialized form of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub operators: Vec<OperatorNode>,
    pub root: String,
}

impl PlanDocument {
    pub fn into_plan(self) -> Result<PlanDAG, PlanError> {
        PlanDAG::new(self.operators, self.root)
    }
}

/// A plan embedded in another file: shorthand text or a plan document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanSource {
    Text(String),
    Document(PlanDocument),
}

impl PlanSource {
    pub fn into_plan(self) -> Result<PlanDAG, PlanError> {
        match self {
            PlanSource::Text(t) => parse_plan(&t),
            PlanSource::Document(d) => d.into_plan(),
        }
    }

    pub fn to_plan(&self) -> Result<PlanDAG, PlanError> {
        self.clone().into_plan()
    }
}

/// Parses a plan document, JSON or shorthand (chosen by the first
/// non-blank character).
pub fn parse_plan(text: &str) -> Result<PlanDAG, PlanError> {
    if text.trim_start().starts_with('{') {
        let doc: PlanDocument = serde_json::from_str(text).map_err(|e| PlanError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        doc.into_plan()
    } else {
        parse_shorthand(text)?.into_plan()
    }
}

/// Desugars shorthand into a [`PlanDocument`] without validating it.
pub fn parse_shorthand(text: &str) -> Result<PlanDocument, PlanError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        ops: Vec::new(),
        counter: 0,
    };
    p.skip_ws();
    let root = p.node()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(PlanDocument {
        operators: p.ops,
        root,
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    ops: Vec<OperatorNode>,
    counter: usize,
}

enum Arg {
    Node(String),
    Word(String),
}

#[derive(Default)]
struct Options {
    id: Option<String>,
    rows: Option<f64>,
    bytes: Option<f64>,
    keys: Vec<String>,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> PlanError {
        let consumed = &self.src[..self.pos.min(self.src.len())];
        let line = consumed.iter().filter(|&&b| b == b'\n').count() + 1;
        let column = self.pos - consumed.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) + 1;
        PlanError::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() {
            match self.src[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), PlanError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", c as char)))
        }
    }

    fn word(&mut self) -> Result<String, PlanError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'.' | b':' | b'-' | b'+') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(self.error("expected a name or number"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<f64, PlanError> {
        let start = self.pos;
        let w = self.word()?;
        w.replace('_', "").parse::<f64>().map_err(|_| {
            self.pos = start;
            self.skip_ws();
            self.error(format!("`{w}` is not a number"))
        })
    }

    fn node(&mut self) -> Result<String, PlanError> {
        self.skip_ws();
        let at = self.pos;
        let name = self.word()?;
        self.expect(b'(')?;
        let mut args = Vec::new();
        let mut opts = Options::default();
        self.skip_ws();
        if self.peek() != Some(b')') {
            loop {
                self.arg(&mut args, &mut opts)?;
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => break,
                    _ => return Err(self.error("expected `,` or `)`")),
                }
            }
        }
        self.expect(b')')?;
        let saved = self.pos;
        self.pos = at;
        let id = self.build(&name, args, opts)?;
        self.pos = saved;
        Ok(id)
    }

    fn arg(&mut self, args: &mut Vec<Arg>, opts: &mut Options) -> Result<(), PlanError> {
        self.skip_ws();
        let start = self.pos;
        let w = self.word()?;
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos = start;
                args.push(Arg::Node(self.node()?));
            }
            Some(b'=') => {
                self.pos += 1;
                match w.as_str() {
                    "id" => opts.id = Some(self.word()?),
                    "rows" | "out" => opts.rows = Some(self.number()?),
                    "bytes" => opts.bytes = Some(self.number()?),
                    "keys" => {
                        self.expect(b'[')?;
                        self.skip_ws();
                        if self.peek() != Some(b']') {
                            loop {
                                opts.keys.push(self.word()?);
                                self.skip_ws();
                                match self.peek() {
                                    Some(b',') => self.pos += 1,
                                    _ => break,
                                }
                            }
                        }
                        self.expect(b']')?;
                    }
                    other => {
                        self.pos = start;
                        return Err(self.error(format!("unknown option `{other}`")));
                    }
                }
            }
            _ => args.push(Arg::Word(w)),
        }
        Ok(())
    }

    fn fresh_id(&mut self, prefix: &str) -> String {
        loop {
            let id = format!("{prefix}{}", self.counter);
            self.counter += 1;
            if !self.ops.iter().any(|o| o.id == id) {
                return id;
            }
        }
    }

    fn out_of(&self, id: &str) -> (f64, f64) {
        let op = self.ops.iter().find(|o| o.id == id).expect("child was just parsed");
        (op.est_out_rows, op.row_bytes)
    }

    fn push(
        &mut self,
        prefix: &str,
        kind: OperatorKind,
        children: Vec<String>,
        table: Option<String>,
        opts: Options,
        default_rows: Option<f64>,
        default_bytes: f64,
    ) -> Result<String, PlanError> {
        let rows = match (opts.rows, default_rows) {
            (Some(r), _) | (None, Some(r)) => r,
            (None, None) => return Err(self.error(format!("`{prefix}` needs `rows=`"))),
        };
        let id = match opts.id {
            Some(id) => id,
            None => self.fresh_id(prefix),
        };
        self.ops.push(OperatorNode {
            id: id.clone(),
            kind,
            est_out_rows: rows,
            row_bytes: opts.bytes.unwrap_or(default_bytes),
            children,
            table,
            keys: opts.keys,
        });
        Ok(id)
    }

    fn build(&mut self, name: &str, args: Vec<Arg>, opts: Options) -> Result<String, PlanError> {
        let mut nodes = Vec::new();
        let mut words = Vec::new();
        for a in args {
            match a {
                Arg::Node(n) => nodes.push(n),
                Arg::Word(w) => words.push(w),
            }
        }
        let leaf = matches!(name, "scan" | "mvscan");
        if leaf {
            if !nodes.is_empty() || words.len() != 1 {
                return Err(self.error(format!("`{name}` takes exactly one table name")));
            }
        } else if !words.is_empty() {
            return Err(self.error(format!("unexpected bare word `{}` in `{name}`", words[0])));
        }
        let arity = |want: usize, this: &Self| -> Result<(), PlanError> {
            if nodes.len() == want {
                Ok(())
            } else {
                Err(this.error(format!("`{name}` takes {want} input(s), got {}", nodes.len())))
            }
        };
        match name {
            "scan" | "mvscan" => {
                let kind = if name == "scan" {
                    OperatorKind::TableScan
                } else {
                    OperatorKind::MVScan
                };
                let table = words.pop();
                self.push(name, kind, vec![], table, opts, None, 100.0)
            }
            "filter" | "project" | "build" | "agg" | "aggregate" | "sort" | "exchange" => {
                arity(1, self)?;
                let kind = match name {
                    "filter" => OperatorKind::Filter,
                    "project" => OperatorKind::Project,
                    "build" => OperatorKind::HashBuild,
                    "sort" => OperatorKind::Sort,
                    "exchange" => OperatorKind::Exchange,
                    _ => OperatorKind::Aggregate,
                };
                let (rows, bytes) = self.out_of(&nodes[0]);
                let prefix = if name == "aggregate" { "agg" } else { name };
                self.push(prefix, kind, nodes, None, opts, Some(rows), bytes)
            }
            "probe" => {
                arity(2, self)?;
                let (_, lbytes) = self.out_of(&nodes[0]);
                let (rrows, rbytes) = self.out_of(&nodes[1]);
                self.push("probe", OperatorKind::HashProbe, nodes, None, opts, Some(rrows), lbytes + rbytes)
            }
            "join" => {
                arity(2, self)?;
                let (lrows, lbytes) = self.out_of(&nodes[0]);
                let (rrows, rbytes) = self.out_of(&nodes[1]);
                let build = self.push(
                    "build",
                    OperatorKind::HashBuild,
                    vec![nodes[0].clone()],
                    None,
                    Options::default(),
                    Some(lrows),
                    lbytes,
                )?;
                self.push(
                    "probe",
                    OperatorKind::HashProbe,
                    vec![build, nodes[1].clone()],
                    None,
                    opts,
                    Some(rrows),
                    lbytes + rbytes,
                )
            }
            "union" => {
                if nodes.len() < 2 {
                    return Err(self.error("`union` takes at least two inputs"));
                }
                let mut rows = 0.0;
                let mut bytes: f64 = 0.0;
                for n in &nodes {
                    let (r, b) = self.out_of(n);
                    rows += r;
                    bytes = bytes.max(b);
                }
                self.push("union", OperatorKind::Union, nodes, None, opts, Some(rows), bytes)
            }
            other => Err(self.error(format!("unknown operator `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scan_is_smallest_plan() {
        let plan = parse_plan("scan(T, rows=1e6)").unwrap();
        assert_eq!(plan.len(), 1);
        let root = plan.root_op();
        assert_eq!(root.kind, OperatorKind::TableScan);
        assert_eq!(root.est_out_rows, 1e6);
        assert_eq!(root.table.as_deref(), Some("T"));
    }

    #[test]
    fn three_table_left_deep_join_has_nine_operators() {
        // 3 scans, 2 builds, 2 probes, 1 aggregate sink, and a filter on the
        // probe-side scan.
        let text = "
            agg(
              probe(build(scan(C, rows=1e4)),
                probe(build(scan(B, rows=1e5)),
                  filter(scan(A, rows=1e7), out=1e6),
                  out=1e6),
                out=1e6),
              out=100)";
        let plan = parse_plan(text).unwrap();
        assert_eq!(plan.len(), 9);
        assert_eq!(plan.root_op().kind, OperatorKind::Aggregate);
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = parse_plan("agg(\n  scan(T rows=1))").unwrap_err();
        match err {
            PlanError::Syntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        let err = parse_plan("{\"operators\": [,], \"root\": \"x\"}").unwrap_err();
        assert!(matches!(err, PlanError::Syntax { line: 1, .. }));
    }

    #[test]
    fn json_self_child_is_cycle() {
        let text = r#"{"operators":[{"id":"f","kind":"Filter","est_out_rows":1.0,"row_bytes":8.0,"children":["f"]}],"root":"f"}"#;
        assert_eq!(parse_plan(text).unwrap_err(), PlanError::Cycle("f".into()));
    }

    #[test]
    fn explicit_ids_and_keys() {
        let plan = parse_plan("join(scan(A, rows=10, id=a), scan(B, rows=20, id=b), out=20, keys=[A.x, B.y], id=j)")
            .unwrap();
        let j = plan.op("j");
        assert_eq!(j.keys, vec!["A.x".to_string(), "B.y".to_string()]);
        assert_eq!(plan.op(&j.children[0]).kind, OperatorKind::HashBuild);
        assert_eq!(j.children[1], "b");
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let plan = parse_plan("agg(join(scan(A, rows=1e5), scan(B, rows=1.5e6), out=3e6), out=7)").unwrap();
        let json = plan.to_json();
        let back = parse_plan(&json).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_json(), json);
    }
}
