//! Canonical text syntax for expressions.
//!
//! ```text
//! root    := "guard" "{" branch (";" branch)* [";"] "}" | sum
//! branch  := INT ":" sum
//! sum     := "2" "*" product "+" product ("+" product)* | product ("+" product)*
//! product := factor ("*" factor)*
//! factor  := TERMINAL | "ReLU" "(" sum ")" | "(" sum ")"
//! ```
//!
//! `+` and `*` fold to the left. `2*a + b` is the only numeric form and only
//! at the head of a sum. Whitespace is insignificant.

use thiserror::Error;

use crate::expr::{Expr, TerminalKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at position {position}: {message}")]
pub struct ParseError {
    /// Byte offset into the input.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(usize),
    Plus,
    Star,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Colon,
    Semi,
}

fn describe(t: Option<&(Tok, usize)>) -> String {
    match t {
        None => "end of input".into(),
        Some((Tok::Ident(s), _)) => format!("`{s}`"),
        Some((Tok::Int(n), _)) => format!("`{n}`"),
        Some((tok, _)) => format!(
            "`{}`",
            match tok {
                Tok::Plus => "+",
                Tok::Star => "*",
                Tok::LParen => "(",
                Tok::RParen => ")",
                Tok::LBrace => "{",
                Tok::RBrace => "}",
                Tok::Colon => ":",
                Tok::Semi => ";",
                _ => unreachable!(),
            }
        ),
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b'+' => Some(Tok::Plus),
            b'*' => Some(Tok::Star),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'{' => Some(Tok::LBrace),
            b'}' => Some(Tok::RBrace),
            b':' => Some(Tok::Colon),
            b';' => Some(Tok::Semi),
            _ => None,
        };
        if let Some(tok) = single {
            out.push((tok, start));
            i += 1;
        } else if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let n = text[start..i].parse().map_err(|_| ParseError {
                position: start,
                message: "integer too large".into(),
            })?;
            out.push((Tok::Int(n), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), start));
        } else {
            let ch = text[start..].chars().next().unwrap_or('?');
            return Err(ParseError {
                position: start,
                message: format!("unexpected character {ch:?}"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn error<T>(&self, expected: &str) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.offset(),
            message: format!("expected {expected}, found {}", describe(self.toks.get(self.pos))),
        })
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.eat(&tok) {
            Ok(())
        } else {
            self.error(what)
        }
    }

    fn root(&mut self) -> Result<Expr, ParseError> {
        let is_guard = matches!(self.peek(), Some(Tok::Ident(s)) if s == "guard")
            && matches!(self.toks.get(self.pos + 1), Some((Tok::LBrace, _)));
        let e = if is_guard { self.guard()? } else { self.sum()? };
        if self.pos != self.toks.len() {
            return self.error("end of input");
        }
        Ok(e)
    }

    fn guard(&mut self) -> Result<Expr, ParseError> {
        self.pos += 2; // `guard {`
        let mut branches: Vec<(usize, Expr)> = Vec::new();
        loop {
            if self.eat(&Tok::RBrace) && !branches.is_empty() {
                break;
            }
            let class_pos = self.offset();
            let class = match self.peek() {
                Some(Tok::Int(n)) => *n,
                _ => return self.error("class index"),
            };
            self.pos += 1;
            if branches.iter().any(|(c, _)| *c == class) {
                return Err(ParseError {
                    position: class_pos,
                    message: format!("class {class} appears twice in guard"),
                });
            }
            self.expect(Tok::Colon, "`:`")?;
            let body = self.sum()?;
            branches.push((class, body));
            if self.eat(&Tok::Semi) {
                continue;
            }
            self.expect(Tok::RBrace, "`;` or `}`")?;
            break;
        }
        Ok(Expr::Guard(branches))
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut acc = if self.peek() == Some(&Tok::Int(2)) {
            self.pos += 1;
            self.expect(Tok::Star, "`*` after `2`")?;
            let left = self.product()?;
            self.expect(Tok::Plus, "`+` completing `2*e + e`")?;
            let right = self.product()?;
            Expr::two_plus(left, right)
        } else {
            self.product()?
        };
        while self.eat(&Tok::Plus) {
            let rhs = self.product()?;
            acc = Expr::add(acc, rhs);
        }
        Ok(acc)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        while self.eat(&Tok::Star) {
            let rhs = self.factor()?;
            acc = Expr::mul(acc, rhs);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek().cloned() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) if name == "ReLU" => {
                self.pos += 1;
                self.expect(Tok::LParen, "`(` after ReLU")?;
                let e = self.sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::relu(e))
            }
            Some(Tok::Ident(name)) if name == "guard" => Err(ParseError {
                position: self.offset(),
                message: "guard is only allowed at the root".into(),
            }),
            Some(Tok::Ident(name)) => match TerminalKind::from_token(&name) {
                Some(t) => {
                    self.pos += 1;
                    Ok(Expr::Terminal(t))
                }
                None => Err(ParseError {
                    position: self.offset(),
                    message: format!("unknown terminal `{name}`"),
                }),
            },
            _ => self.error("a terminal, `ReLU(` or `(`"),
        }
    }
}

pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    p.root()
}

/// Renders `e` in canonical form; `parse_expr(print_expr(e)) == e`.
pub fn print_expr(e: &Expr) -> String {
    let mut out = String::new();
    match e {
        Expr::Guard(branches) => {
            out.push_str("guard{");
            for (i, (class, body)) in branches.iter().enumerate() {
                if i > 0 {
                    out.push_str("; ");
                }
                out.push_str(&format!("{class}: "));
                write_sum(body, &mut out);
            }
            out.push('}');
        }
        other => write_sum(other, &mut out),
    }
    out
}

fn write_sum(e: &Expr, out: &mut String) {
    match e {
        Expr::Add(a, b) => {
            write_sum(a, out);
            out.push_str(" + ");
            write_product(b, out);
        }
        Expr::TwoPlus(a, b) => {
            out.push_str("2*");
            // A bare product after `2*` would read as `2*(a*b)` anyway, but the
            // parentheses make the grouping obvious.
            if matches!(**a, Expr::Mul(..)) {
                out.push('(');
                write_sum(a, out);
                out.push(')');
            } else {
                write_product(a, out);
            }
            out.push_str(" + ");
            write_product(b, out);
        }
        other => write_product(other, out),
    }
}

fn write_product(e: &Expr, out: &mut String) {
    match e {
        Expr::Mul(a, b) => {
            write_product(a, out);
            out.push_str(" * ");
            write_factor(b, out);
        }
        other => write_factor(other, out),
    }
}

fn write_factor(e: &Expr, out: &mut String) {
    match e {
        Expr::Terminal(t) => out.push_str(t.token()),
        Expr::Relu(a) => {
            out.push_str("ReLU(");
            write_sum(a, out);
            out.push(')');
        }
        Expr::Guard(_) => out.push_str(&print_expr(e)),
        other => {
            out.push('(');
            write_sum(other, out);
            out.push(')');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::TerminalKind::*;
    use proptest::prelude::*;

    fn t(k: TerminalKind) -> Expr {
        Expr::Terminal(k)
    }

    #[test]
    fn examples() {
        assert_eq!(
            parse_expr("2*Grads + AblScores").unwrap(),
            Expr::two_plus(t(Grads), t(AblScores))
        );
        let relu = parse_expr("ReLU(Grads)").unwrap();
        assert_eq!(relu, Expr::relu(t(Grads)));
        assert_eq!(print_expr(&relu), "ReLU(Grads)");
        assert_eq!(
            parse_expr("guard{0: Grads; 1: CICScores}").unwrap(),
            Expr::Guard(vec![(0, t(Grads)), (1, t(CicScores))])
        );
        assert_eq!(print_expr(&Expr::two_plus(t(Grads), t(AblScores))), "2*Grads + AblScores");
    }

    #[test]
    fn whitespace_insensitive_and_left_assoc() {
        let a = parse_expr("Grads+top5*CICScores+AblScores").unwrap();
        let b = parse_expr("  Grads +\n top5 * CICScores + AblScores ").unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            Expr::add(Expr::add(t(Grads), Expr::mul(t(Top5), t(CicScores))), t(AblScores))
        );
    }

    #[test]
    fn nesting_forms_round_trip() {
        let cases = [
            Expr::add(t(Grads), Expr::add(t(Top5), t(Top10))),
            Expr::add(t(Grads), Expr::two_plus(t(Top5), t(Top10))),
            Expr::two_plus(Expr::add(t(Grads), t(Top5)), Expr::add(t(Top10), t(Top20))),
            Expr::two_plus(Expr::mul(t(Grads), t(Top5)), t(Top50)),
            Expr::mul(t(Grads), Expr::mul(t(Top5), t(AblScores))),
            Expr::mul(Expr::two_plus(t(Grads), t(Grads)), t(CicScores)),
            Expr::add(Expr::two_plus(t(Grads), t(Grads)), t(CicScores)),
        ];
        for e in cases {
            let text = print_expr(&e);
            assert_eq!(parse_expr(&text).unwrap(), e, "{text}");
        }
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_expr("Grads + Foo").unwrap_err();
        assert_eq!(err.position, 8);
        let err = parse_expr("2*Grads").unwrap_err();
        assert_eq!(err.position, 7);
        let err = parse_expr("Grads $").unwrap_err();
        assert_eq!(err.position, 6);
        let err = parse_expr("ReLU(guard{0: Grads})").unwrap_err();
        assert_eq!(err.position, 5);
        let err = parse_expr("guard{0: Grads; 0: top5}").unwrap_err();
        assert_eq!(err.position, 16);
        assert!(parse_expr("").is_err());
        assert!(parse_expr("3*Grads + Grads").is_err());
    }

    #[test]
    fn ablation_alias_accepted() {
        assert_eq!(parse_expr("AblationScores").unwrap(), t(AblScores));
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in crate::expr::tests::arb_expr()) {
            let text = print_expr(&e);
            prop_assert_eq!(parse_expr(&text).unwrap(), e);
        }
    }
}
