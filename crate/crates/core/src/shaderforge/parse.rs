//! Recursive-descent parser for the shader expression language.
//!
//! ```text
//! program := expr (';' expr (';' expr)?)? ';'?
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```

use super::expr::{BinOp, Expr, Func, ShaderProgram};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f32),
    Ident(String),
    Sym(char),
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<f32>().map_err(|_| Error::Syntax {
                line: tl,
                column: tc,
                expected: vec!["number".into()],
            })?;
            col += i - start;
            out.push(Token {
                tok: Tok::Num(value),
                line: tl,
                column: tc,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
            continue;
        }
        if "+-*/(),;".contains(c) {
            out.push(Token {
                tok: Tok::Sym(c),
                line: tl,
                column: tc,
            });
            i += 1;
            col += 1;
            continue;
        }
        return Err(Error::Syntax {
            line: tl,
            column: tc,
            expected: vec!["expression".into()],
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T> {
        let t = self.peek();
        Err(Error::Syntax {
            line: t.line,
            column: t.column,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn is_sym(&self, c: char) -> bool {
        self.peek().tok == Tok::Sym(c)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.is_sym('-') {
            self.bump();
            // Negated literals fold so printing then parsing is stable.
            return Ok(match self.unary()? {
                Expr::Num(x) => Expr::Num(-x),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(x) => {
                self.bump();
                Ok(Expr::Num(x))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                if !self.is_sym(')') {
                    return self.fail(&["')'"]);
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if self.is_sym('(') {
                    let func = Func::from_name(&name).ok_or_else(|| Error::UnknownIdentifier(name.clone()))?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    loop {
                        if self.is_sym(',') {
                            self.bump();
                            args.push(self.expr()?);
                        } else if self.is_sym(')') {
                            self.bump();
                            break;
                        } else if args.len() >= func.arity() {
                            return self.fail(&["')'"]);
                        } else {
                            return self.fail(&["','", "')'"]);
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(Error::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                match name.as_str() {
                    "u" => Ok(Expr::U),
                    "v" => Ok(Expr::V),
                    "s0" => Ok(Expr::Seed(0)),
                    "s1" => Ok(Expr::Seed(1)),
                    "s2" => Ok(Expr::Seed(2)),
                    "s3" => Ok(Expr::Seed(3)),
                    _ if Func::from_name(&name).is_some() => self.fail(&["'('"]),
                    _ => Err(Error::UnknownIdentifier(name)),
                }
            }
            _ => self.fail(&["expression"]),
        }
    }
}

/// Parse one or three `;`-separated channel expressions. Seeds default to zero.
pub fn parse(source: &str) -> Result<ShaderProgram> {
    let mut p = Parser {
        toks: lex(source)?,
        pos: 0,
    };
    let mut channels = vec![p.expr()?];
    while p.is_sym(';') {
        p.bump();
        if p.peek().tok == Tok::Eof {
            break;
        }
        if channels.len() == 3 {
            return p.fail(&["end of input"]);
        }
        channels.push(p.expr()?);
    }
    if p.peek().tok != Tok::Eof {
        return p.fail(&["';'", "operator", "end of input"]);
    }
    if channels.len() == 2 {
        return p.fail(&["';' followed by a third channel"]);
    }
    Ok(ShaderProgram {
        channels,
        seeds: [0.0; 4],
    })
}

/// Parse an expression with explicit seed parameters.
pub fn parse_with_seeds(source: &str, seeds: [f32; 4]) -> Result<ShaderProgram> {
    let mut p = parse(source)?;
    p.seeds = seeds;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_associativity() {
        let p = parse("1 - 2 - 3 * 4 / 2").unwrap();
        assert_eq!(p.channels[0].eval(0.0, 0.0, &[0.0; 4]), -7.0);
        let p = parse("-u * 2").unwrap();
        assert_eq!(p.channels[0].eval(0.25, 0.0, &[0.0; 4]), -0.5);
    }

    #[test]
    fn three_channels() {
        let p = parse("fract(4*u); fract(4*v); 0.0").unwrap();
        assert_eq!(p.channels.len(), 3);
    }

    #[test]
    fn unterminated_call_reports_position() {
        match parse("sin(u").unwrap_err() {
            Error::Syntax {
                line,
                column,
                expected,
            } => {
                assert_eq!((line, column), (1, 6));
                assert_eq!(expected, vec!["')'".to_string()]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn multi_line_positions() {
        match parse("sin(u)\n + * v").unwrap_err() {
            Error::Syntax { line, column, .. } => assert_eq!((line, column), (2, 4)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn named_errors() {
        assert!(matches!(parse("w + 1"), Err(Error::UnknownIdentifier(n)) if n == "w"));
        assert!(matches!(parse("tan(u)"), Err(Error::UnknownIdentifier(n)) if n == "tan"));
        assert!(matches!(
            parse("mix(u, v)"),
            Err(Error::Arity { expected: 3, got: 2, .. })
        ));
        assert!(parse("u; v").is_err());
        assert!(parse("u; v; u; v").is_err());
    }

    #[test]
    fn print_parse_fixed_point() {
        let src = "mix(-u, pow(v, -2.5), noise(u*8, v*8, 3)) / (s1 - -0.125); step(0.5, length2(u-0.5, v-0.5)); --u";
        let a = parse(src).unwrap();
        let b = parse(&a.source()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source(), b.source());
    }
}
