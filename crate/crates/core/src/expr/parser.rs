use super::{BinOp, Expr, Func, Node, ParseError, ParseErrorKind, Var};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Int(usize),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
    text: String,
}

fn err<T>(offset: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
    Err(ParseError { offset, kind })
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let simple = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push(Token { tok, offset: start, text: c.to_string() });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let mut is_int = c != '.';
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                is_int &= bytes[i] != b'.';
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                    is_int = false;
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| ParseError { offset: start, kind: ParseErrorKind::InvalidNumber(text.into()) })?;
            if !value.is_finite() {
                return err(start, ParseErrorKind::InvalidNumber(text.into()));
            }
            let tok = match (is_int, text.parse::<usize>()) {
                (true, Ok(n)) => Tok::Int(n),
                _ => Tok::Num(value),
            };
            out.push(Token { tok, offset: start, text: text.into() });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let text = &src[start..i];
            out.push(Token { tok: Tok::Ident(text.into()), offset: start, text: text.into() });
            continue;
        }
        let ch = src[start..].chars().next().unwrap_or(c);
        return err(start, ParseErrorKind::UnexpectedChar(ch));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(t.clone())
            }
            None => err(self.end, ParseErrorKind::UnexpectedEnd),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        let t = self.next()?;
        if t.tok == want {
            Ok(())
        } else {
            err(t.offset, ParseErrorKind::UnexpectedToken(t.text))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn index(&mut self) -> Result<usize, ParseError> {
        self.expect(Tok::LBracket)?;
        let t = self.next()?;
        let idx = match t.tok {
            Tok::Int(n) if n >= 1 => n,
            _ => return err(t.offset, ParseErrorKind::InvalidIndex(t.text)),
        };
        self.expect(Tok::RBracket)?;
        Ok(idx)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.next()?;
        match t.tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Int(n) => Ok(Node::Num(n as f64)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                let var = match name.as_str() {
                    "x0" => Var::X0(self.index()?),
                    "xi" => {
                        let k = self.index()?;
                        Var::Xi(k, self.index()?)
                    }
                    "y" => Var::Y(self.index()?),
                    "u" => Var::U(self.index()?),
                    "t" => Var::T,
                    _ if self.peek() == Some(&Tok::LParen) => {
                        return err(t.offset, ParseErrorKind::UnknownFunction(name));
                    }
                    _ => return err(t.offset, ParseErrorKind::UnknownVariable(name)),
                };
                Ok(Node::Var(var))
            }
            _ => err(t.offset, ParseErrorKind::UnexpectedToken(t.text)),
        }
    }
}

/// Parses an expression; errors carry the byte offset of the offending token.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, end: src.len() };
    let e = p.expr()?;
    if let Some(t) = p.toks.get(p.pos) {
        return err(t.offset, ParseErrorKind::UnexpectedToken(t.text.clone()));
    }
    Ok(e)
}
