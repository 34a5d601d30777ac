use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::plan::PlanDAG;

/// Identity of a query template: a digest of the operator-kind tree with
/// table names and key references. Row counts, widths and operator ids do
/// not contribute.
pub fn template_signature(plan: &PlanDAG) -> String {
    let mut shape = String::new();
    write_shape(plan, plan.root(), &mut shape);
    let digest = Sha256::digest(shape.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn write_shape(plan: &PlanDAG, id: &str, out: &mut String) {
    let op = plan.op(id);
    let _ = write!(out, "{}", op.kind);
    if let Some(t) = &op.table {
        let _ = write!(out, "[{t}]");
    }
    if !op.keys.is_empty() {
        let _ = write!(out, "{{{}}}", op.keys.join(","));
    }
    out.push('(');
    for (i, c) in op.children.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_shape(plan, c, out);
    }
    out.push(')');
}
