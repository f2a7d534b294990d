//! Reader for the `.psl` text format.
//!
//! ```text
//! spec  := "delta" FLOAT ";" "cars" IDENT+ ";" phi
//! phi   := seq ( "|" phi )?
//! seq   := "(" phi ")" | event ( "." phi | ":" FLOAT )
//! event := IDENT IDENT "->" IDENT ( "(" IDENT ")" )?
//! ```
//!
//! Whitespace is insignificant and `#` starts a comment running to the end of
//! the line.

use thiserror::Error;

use crate::protocol::{CarId, FullSpec, GlobalEvent, ProtocolSpec, SpecError};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error(transparent)]
    Invalid(#[from] SpecError),
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Arrow,
    Dot,
    Colon,
    Pipe,
    Semi,
    LParen,
    RParen,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(n) => format!("number `{n}`"),
            Tok::Arrow => "`->`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Pipe => "`|`".into(),
            Tok::Semi => "`;`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut column) = (0, 1, 1);
    let syntax = |msg: String, line, column| ParseError {
        kind: ParseErrorKind::Syntax(msg),
        line,
        column,
    };
    while i < chars.len() {
        let c = chars[i];
        let (start_i, start_line, start_col) = (i, line, column);
        if c == '\n' {
            i += 1;
            line += 1;
            column = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            column += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()) {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
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
            let lexeme: String = chars[start..i].iter().collect();
            let value = lexeme
                .parse::<f64>()
                .map_err(|_| syntax(format!("malformed number `{lexeme}`"), start_line, start_col))?;
            Tok::Number(value)
        } else {
            i += 1;
            match c {
                '-' if chars.get(i) == Some(&'>') => {
                    i += 1;
                    Tok::Arrow
                }
                '.' => Tok::Dot,
                ':' => Tok::Colon,
                '|' => Tok::Pipe,
                ';' => Tok::Semi,
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                other => return Err(syntax(format!("unexpected character `{other}`"), start_line, start_col)),
            }
        };
        column = start_col + (i - start_i);
        tokens.push(Token {
            tok,
            line: start_line,
            column: start_col,
        });
    }
    tokens.push(Token {
        tok: Tok::Eof,
        line,
        column,
    });
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    cars: Vec<CarId>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> &Token {
        let t = &self.tokens[self.pos];
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, token: &Token, kind: ParseErrorKind) -> ParseError {
        ParseError {
            kind,
            line: token.line,
            column: token.column,
        }
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        let t = self.peek();
        self.error_at(
            t,
            ParseErrorKind::Syntax(format!("expected {expected}, found {}", t.tok.describe())),
        )
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if self.peek().tok == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn number(&mut self, what: &str) -> Result<(f64, Token), ParseError> {
        let token = self.peek().clone();
        match token.tok {
            Tok::Number(n) => {
                self.bump();
                Ok((n, token))
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => Err(self.unexpected(&format!("`{kw}`"))),
        }
    }

    fn header(&mut self) -> Result<f64, ParseError> {
        self.keyword("delta")?;
        let (delta, token) = self.number("drop probability bound")?;
        if !(0.0..=1.0).contains(&delta) {
            return Err(self.error_at(&token, SpecError::DeltaOutOfRange(delta).into()));
        }
        self.expect(Tok::Semi)?;
        self.keyword("cars")?;
        loop {
            let token = self.peek().clone();
            match &token.tok {
                Tok::Ident(name) => {
                    let car = CarId::from(name.as_str());
                    if self.cars.contains(&car) {
                        return Err(self.error_at(&token, SpecError::DuplicateCar(name.clone()).into()));
                    }
                    self.cars.push(car);
                    self.bump();
                }
                Tok::Semi if !self.cars.is_empty() => {
                    self.bump();
                    break;
                }
                _ => return Err(self.unexpected("car name")),
            }
        }
        Ok(delta)
    }

    fn car(&mut self) -> Result<CarId, ParseError> {
        let token = self.peek().clone();
        let name = self.ident("car name")?;
        let car = CarId::from(name.as_str());
        if !self.cars.is_empty() && !self.cars.contains(&car) {
            return Err(self.error_at(&token, SpecError::UnknownCar(name).into()));
        }
        Ok(car)
    }

    fn event(&mut self, path: &[GlobalEvent]) -> Result<GlobalEvent, ParseError> {
        let start = self.peek().clone();
        let name = self.ident("event name")?;
        let src = self.car()?;
        self.expect(Tok::Arrow)?;
        let dst = self.car()?;
        let mut event = GlobalEvent::new(name, src, dst);
        if self.peek().tok == Tok::LParen {
            // `(` directly after an event is its data term
            self.bump();
            event.data = Some(self.ident("data term")?);
            self.expect(Tok::RParen)?;
        }
        if event.src == event.dst {
            return Err(self.error_at(&start, SpecError::SameEndpoints(event.to_string()).into()));
        }
        let key = event.key();
        if path.iter().any(|e| e.key() == key) {
            return Err(self.error_at(&start, SpecError::DuplicateEventOnPath(key.to_string()).into()));
        }
        Ok(event)
    }

    fn phi(&mut self, path: &mut Vec<GlobalEvent>) -> Result<ProtocolSpec, ParseError> {
        let left = self.seq(path)?;
        if self.peek().tok == Tok::Pipe {
            self.bump();
            let right = self.phi(path)?;
            return Ok(ProtocolSpec::or(left, right));
        }
        Ok(left)
    }

    fn seq(&mut self, path: &mut Vec<GlobalEvent>) -> Result<ProtocolSpec, ParseError> {
        if self.peek().tok == Tok::LParen {
            self.bump();
            let inner = self.phi(path)?;
            self.expect(Tok::RParen)?;
            return Ok(inner);
        }
        let event = self.event(path)?;
        match self.peek().tok {
            Tok::Dot => {
                self.bump();
                path.push(event.clone());
                let rest = self.phi(path);
                path.pop();
                Ok(ProtocolSpec::seq(event, rest?))
            }
            Tok::Colon => {
                self.bump();
                let (p, token) = self.number("probability")?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(self.error_at(&token, SpecError::ProbabilityOutOfRange(p).into()));
                }
                Ok(ProtocolSpec::leaf(event, p))
            }
            _ => Err(self.unexpected("`.` or `:`")),
        }
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        if self.peek().tok == Tok::Eof {
            Ok(())
        } else {
            Err(self.unexpected("end of input"))
        }
    }
}

/// Parses a complete `.psl` document.
pub fn parse_spec(text: &str) -> Result<FullSpec, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        cars: Vec::new(),
    };
    let delta = parser.header()?;
    let protocol = parser.phi(&mut Vec::new())?;
    parser.finish()?;
    Ok(FullSpec {
        protocol,
        delta,
        cars: parser.cars,
    })
}

/// Parses a bare protocol formula without the `delta`/`cars` header; any car
/// name is accepted.
pub fn parse_protocol(text: &str) -> Result<ProtocolSpec, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        cars: Vec::new(),
    };
    let protocol = parser.phi(&mut Vec::new())?;
    parser.finish()?;
    Ok(protocol)
}
