//! Recursive-descent parser for the axiom language.
//!
//! ```text
//! theory   = { "learnable" IDENT } { axiom } ;
//! axiom    = "forall" IDENT ":" formula ;
//! formula  = iff ;
//! iff      = imp { "<->" imp } ;
//! imp      = or { "->" or } ;
//! or       = and { "|" and } ;
//! and      = unary { "&" unary } ;
//! unary    = "~" unary | atom ;
//! atom     = IDENT "(" IDENT ")" | "(" formula ")" ;
//! ```
//!
//! `#` starts a comment running to the end of the line. Binary operators
//! associate to the left.

use super::formula::{Formula, Theory};
use super::{LtnError, Pos, KNOWN_PREDICATES};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    LParen,
    RParen,
    Colon,
    Not,
    And,
    Or,
    Imp,
    Iff,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Not => "`~`".into(),
            Tok::And => "`&`".into(),
            Tok::Or => "`|`".into(),
            Tok::Imp => "`->`".into(),
            Tok::Iff => "`<->`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn syntax(pos: Pos, message: impl Into<String>) -> LtnError {
    LtnError::Syntax {
        line: pos.line,
        col: pos.col,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, LtnError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1, 1);
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars<'_>>| {
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        match c {
            '#' => {
                while chars.peek().is_some_and(|&c| c != '\n') {
                    bump(&mut chars);
                }
            }
            c if c.is_whitespace() => {
                bump(&mut chars);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_alphanumeric() || *c == '_') {
                    s.push(bump(&mut chars).unwrap());
                }
                out.push((Tok::Ident(s), pos));
            }
            '(' | ')' | ':' | '~' | '&' | '|' => {
                bump(&mut chars);
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ':' => Tok::Colon,
                    '~' => Tok::Not,
                    '&' => Tok::And,
                    _ => Tok::Or,
                };
                out.push((tok, pos));
            }
            '-' => {
                bump(&mut chars);
                if bump(&mut chars) != Some('>') {
                    return Err(syntax(pos, "expected `->`"));
                }
                out.push((Tok::Imp, pos));
            }
            '<' => {
                bump(&mut chars);
                if bump(&mut chars) != Some('-') || bump(&mut chars) != Some('>') {
                    return Err(syntax(pos, "expected `<->`"));
                }
                out.push((Tok::Iff, pos));
            }
            other => return Err(syntax(pos, format!("unexpected character {other:?}"))),
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    /// Bound variable of the axiom being parsed.
    bound: Option<String>,
    atoms: Vec<(String, Pos)>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn next(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if t.0 != Tok::Eof {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<Pos, LtnError> {
        let (tok, pos) = self.next();
        if tok == want {
            Ok(pos)
        } else {
            Err(syntax(
                pos,
                format!("expected {}, found {}", want.describe(), tok.describe()),
            ))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), LtnError> {
        match self.next() {
            (Tok::Ident(s), pos) if !is_keyword(&s) => Ok((s, pos)),
            (tok, pos) => Err(syntax(pos, format!("expected {what}, found {}", tok.describe()))),
        }
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn binary(
        &mut self,
        op: Tok,
        sub: fn(&mut Self) -> Result<Formula, LtnError>,
        build: fn(Formula, Formula) -> Formula,
    ) -> Result<Formula, LtnError> {
        let mut lhs = sub(self)?;
        while *self.peek() == op {
            self.next();
            let rhs = sub(self)?;
            lhs = build(lhs, rhs);
        }
        Ok(lhs)
    }

    fn iff(&mut self) -> Result<Formula, LtnError> {
        self.binary(Tok::Iff, Self::imp, Formula::iff)
    }

    fn imp(&mut self) -> Result<Formula, LtnError> {
        self.binary(Tok::Imp, Self::or, Formula::implies)
    }

    fn or(&mut self) -> Result<Formula, LtnError> {
        self.binary(Tok::Or, Self::and, Formula::or)
    }

    fn and(&mut self) -> Result<Formula, LtnError> {
        self.binary(Tok::And, Self::unary, Formula::and)
    }

    fn unary(&mut self) -> Result<Formula, LtnError> {
        if *self.peek() == Tok::Not {
            self.next();
            return Ok(Formula::not(self.unary()?));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Formula, LtnError> {
        if *self.peek() == Tok::LParen {
            self.next();
            let f = self.iff()?;
            self.expect(Tok::RParen)?;
            return Ok(f);
        }
        let (predicate, ppos) = self.ident("a predicate or `(`")?;
        self.expect(Tok::LParen)?;
        let (variable, vpos) = self.ident("a variable")?;
        self.expect(Tok::RParen)?;
        if let Some(bound) = &self.bound {
            if *bound != variable {
                return Err(LtnError::MultipleVariables {
                    expected: bound.clone(),
                    found: variable,
                    line: vpos.line,
                    col: vpos.col,
                });
            }
        }
        self.atoms.push((predicate.clone(), ppos));
        Ok(Formula::Atom {
            predicate,
            variable,
        })
    }
}

fn is_keyword(s: &str) -> bool {
    s == "forall" || s == "learnable"
}

/// Parses and checks a theory: every predicate must be a known type
/// predicate or declared learnable, and all axioms share one variable.
pub fn parse_theory(text: &str) -> Result<Theory, LtnError> {
    let mut p = Parser {
        toks: lex(text)?,
        at: 0,
        bound: None,
        atoms: Vec::new(),
    };
    let mut learnable: Vec<String> = Vec::new();
    while p.keyword("learnable") {
        p.next();
        let (name, pos) = p.ident("a predicate name")?;
        if KNOWN_PREDICATES.contains(&name.as_str()) || learnable.contains(&name) {
            return Err(LtnError::DuplicatePredicate {
                name,
                line: pos.line,
                col: pos.col,
            });
        }
        learnable.push(name);
    }

    let mut variable: Option<String> = None;
    let mut axioms = Vec::new();
    while *p.peek() != Tok::Eof {
        if !p.keyword("forall") {
            let (tok, pos) = p.next();
            return Err(syntax(pos, format!("expected `forall`, found {}", tok.describe())));
        }
        p.next();
        let (var, vpos) = p.ident("a variable")?;
        match &variable {
            Some(v) if *v != var => {
                return Err(LtnError::MultipleVariables {
                    expected: v.clone(),
                    found: var,
                    line: vpos.line,
                    col: vpos.col,
                })
            }
            _ => variable = Some(var.clone()),
        }
        p.bound = Some(var);
        p.expect(Tok::Colon)?;
        axioms.push(p.iff()?);
    }

    for (name, pos) in p.atoms {
        if !KNOWN_PREDICATES.contains(&name.as_str()) && !learnable.contains(&name) {
            return Err(LtnError::UndeclaredPredicate {
                name,
                line: pos.line,
                col: pos.col,
            });
        }
    }
    let variable = variable.ok_or(LtnError::NoAxioms)?;
    Ok(Theory {
        variable,
        learnable,
        axioms,
    })
}
