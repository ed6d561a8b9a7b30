//! CAM-weight expressions and their evaluation into per-channel weights.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("record {record}: terminal {terminal} has {actual} entries, expected {expected}")]
    TerminalShape {
        record: String,
        terminal: TerminalKind,
        expected: usize,
        actual: usize,
    },
    #[error("record {record}: guard has no branch for predicted class {class}")]
    MissingBranch { record: String, class: usize },
    #[error("guard is only allowed at the root of an expression")]
    NestedGuard,
    #[error("guard lists class {0} more than once")]
    DuplicateBranch(usize),
    #[error("guard must cover classes 0..{expected}, got {got:?}")]
    IncompleteGuard { expected: usize, got: Vec<usize> },
    #[error("record {record}: weights overflowed to a non-finite value")]
    NonFinite { record: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalKind {
    Grads,
    Top5,
    Top10,
    Top20,
    Top50,
    #[serde(rename = "CICScores")]
    CicScores,
    #[serde(rename = "AblScores")]
    AblScores,
}

impl TerminalKind {
    pub const ALL: [TerminalKind; 7] = [
        TerminalKind::Grads,
        TerminalKind::Top5,
        TerminalKind::Top10,
        TerminalKind::Top20,
        TerminalKind::Top50,
        TerminalKind::CicScores,
        TerminalKind::AblScores,
    ];

    /// `n` for the `top_n(Grads)` terminals.
    pub fn top_n(self) -> Option<usize> {
        match self {
            TerminalKind::Top5 => Some(5),
            TerminalKind::Top10 => Some(10),
            TerminalKind::Top20 => Some(20),
            TerminalKind::Top50 => Some(50),
            _ => None,
        }
    }

    /// Canonical token in the expression syntax.
    pub fn token(self) -> &'static str {
        match self {
            TerminalKind::Grads => "Grads",
            TerminalKind::Top5 => "top5",
            TerminalKind::Top10 => "top10",
            TerminalKind::Top20 => "top20",
            TerminalKind::Top50 => "top50",
            TerminalKind::CicScores => "CICScores",
            TerminalKind::AblScores => "AblScores",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "Grads" => TerminalKind::Grads,
            "top5" => TerminalKind::Top5,
            "top10" => TerminalKind::Top10,
            "top20" => TerminalKind::Top20,
            "top50" => TerminalKind::Top50,
            "CICScores" => TerminalKind::CicScores,
            "AblScores" | "AblationScores" => TerminalKind::AblScores,
            _ => return None,
        })
    }
}

impl fmt::Display for TerminalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Expression AST. Children are shared so the enumerator can reuse subtrees.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Terminal(TerminalKind),
    Add(Arc<Expr>, Arc<Expr>),
    /// `2*left + right`
    TwoPlus(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Relu(Arc<Expr>),
    /// Dispatch on the predicted class; only valid at the root.
    Guard(Vec<(usize, Expr)>),
}

impl Expr {
    pub fn terminal(kind: TerminalKind) -> Self {
        Expr::Terminal(kind)
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Arc::new(a), Arc::new(b))
    }

    pub fn two_plus(a: Expr, b: Expr) -> Self {
        Expr::TwoPlus(Arc::new(a), Arc::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(Arc::new(a), Arc::new(b))
    }

    pub fn relu(a: Expr) -> Self {
        Expr::Relu(Arc::new(a))
    }

    /// Number of AST nodes; a guard counts itself plus its branches.
    pub fn size(&self) -> usize {
        match self {
            Expr::Terminal(_) => 1,
            Expr::Add(a, b) | Expr::TwoPlus(a, b) | Expr::Mul(a, b) => 1 + a.size() + b.size(),
            Expr::Relu(a) => 1 + a.size(),
            Expr::Guard(branches) => 1 + branches.iter().map(|(_, e)| e.size()).sum::<usize>(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Terminal(_) => 1,
            Expr::Add(a, b) | Expr::TwoPlus(a, b) | Expr::Mul(a, b) => 1 + a.depth().max(b.depth()),
            Expr::Relu(a) => 1 + a.depth(),
            Expr::Guard(branches) => 1 + branches.iter().map(|(_, e)| e.depth()).max().unwrap_or(0),
        }
    }

    /// Terminals referenced anywhere in the tree.
    pub fn terminals(&self) -> Vec<TerminalKind> {
        let mut out = Vec::new();
        self.collect_terminals(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_terminals(&self, out: &mut Vec<TerminalKind>) {
        match self {
            Expr::Terminal(t) => out.push(*t),
            Expr::Add(a, b) | Expr::TwoPlus(a, b) | Expr::Mul(a, b) => {
                a.collect_terminals(out);
                b.collect_terminals(out);
            }
            Expr::Relu(a) => a.collect_terminals(out),
            Expr::Guard(branches) => branches.iter().for_each(|(_, e)| e.collect_terminals(out)),
        }
    }

    /// Structural checks: guards only at the root, each class listed once.
    pub fn check_structure(&self) -> Result<(), ExprError> {
        match self {
            Expr::Guard(branches) => {
                let mut seen = std::collections::BTreeSet::new();
                for (class, e) in branches {
                    if !seen.insert(*class) {
                        return Err(ExprError::DuplicateBranch(*class));
                    }
                    e.check_guard_free()?;
                }
                Ok(())
            }
            other => other.check_guard_free(),
        }
    }

    fn check_guard_free(&self) -> Result<(), ExprError> {
        match self {
            Expr::Terminal(_) => Ok(()),
            Expr::Add(a, b) | Expr::TwoPlus(a, b) | Expr::Mul(a, b) => {
                a.check_guard_free()?;
                b.check_guard_free()
            }
            Expr::Relu(a) => a.check_guard_free(),
            Expr::Guard(_) => Err(ExprError::NestedGuard),
        }
    }

    /// Checks that a root guard covers exactly the classes `0..num_classes`.
    pub fn check_guard_coverage(&self, num_classes: usize) -> Result<(), ExprError> {
        self.check_structure()?;
        if let Expr::Guard(branches) = self {
            let mut got: Vec<usize> = branches.iter().map(|(c, _)| *c).collect();
            got.sort_unstable();
            if got != (0..num_classes).collect::<Vec<_>>() {
                return Err(ExprError::IncompleteGuard {
                    expected: num_classes,
                    got,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::syntax::print_expr(self))
    }
}

/// Per-channel CAM weights for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> WeightVector {
        WeightVector(self.0.iter().map(|v| v * c).collect())
    }
}

/// Keeps the `n` largest entries (ties to the lowest index) and zeroes the rest.
pub fn top_n(v: &WeightVector, n: usize) -> WeightVector {
    let len = v.len();
    if n >= len {
        return v.clone();
    }
    let mut order: Vec<usize> = (0..len).collect();
    // Stable sort keeps ascending index among equal values.
    order.sort_by(|&a, &b| v.0[b].total_cmp(&v.0[a]));
    let mut out = vec![0.0; len];
    for &i in &order[..n] {
        out[i] = v.0[i];
    }
    WeightVector(out)
}

fn terminal_weights(kind: TerminalKind, rec: &ImageRecord) -> Result<WeightVector, ExprError> {
    let k = rec.num_channels();
    let source = match kind {
        TerminalKind::CicScores => &rec.cic_scores,
        TerminalKind::AblScores => &rec.abl_scores,
        _ => &rec.grads,
    };
    if source.len() != k {
        return Err(ExprError::TerminalShape {
            record: rec.image_id.clone(),
            terminal: kind,
            expected: k,
            actual: source.len(),
        });
    }
    let v = WeightVector(source.to_f64());
    Ok(match kind.top_n() {
        Some(n) => top_n(&v, n),
        None => v,
    })
}

fn zip_with(a: WeightVector, b: WeightVector, f: impl Fn(f64, f64) -> f64) -> WeightVector {
    WeightVector(a.0.into_iter().zip(b.0).map(|(x, y)| f(x, y)).collect())
}

fn eval_inner(e: &Expr, rec: &ImageRecord) -> Result<WeightVector, ExprError> {
    Ok(match e {
        Expr::Terminal(kind) => terminal_weights(*kind, rec)?,
        Expr::Add(a, b) => zip_with(eval_inner(a, rec)?, eval_inner(b, rec)?, |x, y| x + y),
        Expr::TwoPlus(a, b) => zip_with(eval_inner(a, rec)?, eval_inner(b, rec)?, |x, y| 2.0 * x + y),
        Expr::Mul(a, b) => zip_with(eval_inner(a, rec)?, eval_inner(b, rec)?, |x, y| x * y),
        Expr::Relu(a) => {
            let mut v = eval_inner(a, rec)?;
            v.0.iter_mut().for_each(|x| *x = x.max(0.0));
            v
        }
        Expr::Guard(branches) => {
            let class = rec.predicted_class;
            let branch = branches
                .iter()
                .find(|(c, _)| *c == class)
                .ok_or_else(|| ExprError::MissingBranch {
                    record: rec.image_id.clone(),
                    class,
                })?;
            eval_inner(&branch.1, rec)?
        }
    })
}

/// Evaluates `e` on one record into a `K`-length weight vector.
pub fn eval_weights(e: &Expr, rec: &ImageRecord) -> Result<WeightVector, ExprError> {
    let v = eval_inner(e, rec)?;
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(ExprError::NonFinite {
            record: rec.image_id.clone(),
        });
    }
    Ok(v)
}

/// Anything that yields per-image CAM weights: expressions, or test wrappers
/// such as scaled expressions.
pub trait WeightSource: Sync {
    fn weights(&self, rec: &ImageRecord) -> Result<WeightVector, ExprError>;
}

impl WeightSource for Expr {
    fn weights(&self, rec: &ImageRecord) -> Result<WeightVector, ExprError> {
        eval_weights(self, rec)
    }
}

/// `c * e`, outside the grammar.
pub struct Scaled<'a> {
    pub expr: &'a Expr,
    pub factor: f64,
}

impl WeightSource for Scaled<'_> {
    fn weights(&self, rec: &ImageRecord) -> Result<WeightVector, ExprError> {
        Ok(eval_weights(self.expr, rec)?.scaled(self.factor))
    }
}
