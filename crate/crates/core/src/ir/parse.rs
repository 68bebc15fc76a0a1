//! Parser for the textual IR.

use std::collections::HashMap;

use super::{
    Action, AxesPerDim, ConstValue, ElemKind, Func, Mesh, Module, Monoid, Op, OpKind, Region,
    TensorType, Type, ValueId,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Value(String),
    Symbol(String),
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Action(String),
    TypeLit(String),
    Punct(&'static str),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Value(v) => format!("`%{v}`"),
            Tok::Symbol(s) => format!("`@{s}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(i) => format!("`{i}`"),
            Tok::Float(f) => format!("`{f}`"),
            Tok::Str(s) => format!("`\"{s}\"`"),
            Tok::Action(a) => format!("`#{a}`"),
            Tok::TypeLit(t) => format!("`{t}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, message: String| ParseError { line, col, message };
    while i < chars.len() {
        let c = chars[i];
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
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = (line, col);
        let take_while = |i: &mut usize, f: &dyn Fn(char) -> bool| {
            let s = *i;
            while *i < chars.len() && f(chars[*i]) {
                *i += 1;
            }
            chars[s..*i].iter().collect::<String>()
        };
        let tok = match c {
            '%' | '@' => {
                i += 1;
                let name = take_while(&mut i, &is_ident_char);
                if name.is_empty() {
                    return Err(err(line, col, format!("expected a name after `{c}`")));
                }
                if c == '%' {
                    Tok::Value(name)
                } else {
                    Tok::Symbol(name)
                }
            }
            '#' => {
                i += 1;
                let mut name = take_while(&mut i, &is_ident_char);
                if chars.get(i) == Some(&'<') {
                    let rest = take_while(&mut i, &|c| c != '>');
                    if i >= chars.len() {
                        return Err(err(line, col, "unterminated action".into()));
                    }
                    i += 1;
                    name.push_str(&rest);
                    name.push('>');
                }
                Tok::Action(name)
            }
            '"' => {
                i += 1;
                let s = take_while(&mut i, &|c| c != '"' && c != '\n');
                if chars.get(i) != Some(&'"') {
                    return Err(err(line, col, "unterminated string".into()));
                }
                i += 1;
                Tok::Str(s)
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                i += 2;
                Tok::Punct("->")
            }
            c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let s = i;
                i += 1;
                let mut float = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_digit() {
                        i += 1;
                    } else if d == '.' || d == 'e' || d == 'E' {
                        float = true;
                        i += 1;
                        if (d == 'e' || d == 'E') && matches!(chars.get(i), Some('-') | Some('+')) {
                            i += 1;
                        }
                    } else {
                        break;
                    }
                }
                let text: String = chars[s..i].iter().collect();
                if float {
                    Tok::Float(text.parse().map_err(|_| err(line, col, format!("bad number `{text}`")))?)
                } else {
                    Tok::Int(text.parse().map_err(|_| err(line, col, format!("bad number `{text}`")))?)
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let name = take_while(&mut i, &is_ident_char);
                if (name == "tensor" || name == "range") && chars.get(i) == Some(&'<') {
                    let rest = take_while(&mut i, &|c| c != '>' && c != '\n');
                    if chars.get(i) != Some(&'>') {
                        return Err(err(line, col, "unterminated type".into()));
                    }
                    i += 1;
                    Tok::TypeLit(format!("{name}{rest}>"))
                } else {
                    Tok::Ident(name)
                }
            }
            _ => {
                let p = match c {
                    '(' => "(",
                    ')' => ")",
                    '{' => "{",
                    '}' => "}",
                    '[' => "[",
                    ']' => "]",
                    '<' => "<",
                    '>' => ">",
                    ',' => ",",
                    ':' => ":",
                    '=' => "=",
                    _ => return Err(err(line, col, format!("unexpected character `{c}`"))),
                };
                i += 1;
                Tok::Punct(p)
            }
        };
        // Columns track characters consumed on this line; tokens never span lines.
        let consumed = i - (chars[..i].iter().rposition(|&c| c == '\n').map_or(0, |p| p + 1));
        col = consumed + 1;
        out.push(Spanned {
            tok,
            line: start.0,
            col: start.1,
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

fn parse_type_lit(s: &str) -> Option<Type> {
    if let Some(inner) = s.strip_prefix("range<").and_then(|r| r.strip_suffix('>')) {
        let k: usize = inner.trim().parse().ok()?;
        return (k >= 1).then_some(Type::Range(k));
    }
    let inner = s.strip_prefix("tensor<")?.strip_suffix('>')?;
    let parts: Vec<&str> = inner.split('x').collect();
    let (elem, dims) = parts.split_last()?;
    let elem = match *elem {
        "f32" => ElemKind::F32,
        "i32" => ElemKind::I32,
        _ => return None,
    };
    let dims = dims
        .iter()
        .map(|d| d.parse::<usize>().ok().filter(|&d| d >= 1))
        .collect::<Option<Vec<_>>>()?;
    Some(Type::Tensor(TensorType { dims, elem }))
}

#[derive(Clone, Debug)]
enum Attr {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    List(Vec<Attr>),
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    func: Func,
    scopes: Vec<HashMap<String, ValueId>>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn err_here(&self, message: impl Into<String>) -> ParseError {
        let s = &self.toks[self.pos];
        ParseError {
            line: s.line,
            col: s.col,
            message: message.into(),
        }
    }

    fn unexpected(&self, want: &str) -> ParseError {
        self.err_here(format!("expected {want}, found {}", self.peek().describe()))
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, p: &str) -> bool {
        if matches!(self.peek(), Tok::Punct(q) if *q == p) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> PResult<()> {
        if self.eat(p) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{p}`")))
        }
    }

    fn eat_ident(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Tok::Ident(s) if s == kw) {
            self.next();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.unexpected("an identifier")),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.next();
                Ok(i)
            }
            _ => Err(self.unexpected("an integer")),
        }
    }

    fn usize(&mut self) -> PResult<usize> {
        let i = self.int()?;
        usize::try_from(i).map_err(|_| self.err_here(format!("`{i}` must be non-negative")))
    }

    fn string(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.unexpected("a string")),
        }
    }

    fn ty(&mut self) -> PResult<Type> {
        match self.peek().clone() {
            Tok::TypeLit(s) => {
                let t = parse_type_lit(&s).ok_or_else(|| self.err_here(format!("malformed type `{s}`")))?;
                self.next();
                Ok(t)
            }
            _ => Err(self.unexpected("a type")),
        }
    }

    fn tensor_ty(&mut self) -> PResult<TensorType> {
        match self.ty()? {
            Type::Tensor(t) => Ok(t),
            Type::Range(_) => Err(self.err_here("expected a tensor type")),
        }
    }

    fn types(&mut self) -> PResult<Vec<Type>> {
        let mut out = vec![self.ty()?];
        while matches!(self.peek(), Tok::Punct(",")) && matches!(self.toks[self.pos + 1].tok, Tok::TypeLit(_)) {
            self.next();
            out.push(self.ty()?);
        }
        Ok(out)
    }

    fn define(&mut self, name: &str, ty: Type) -> PResult<ValueId> {
        let scope = self.scopes.last_mut().unwrap();
        if scope.contains_key(name) {
            return Err(self.err_here(format!("value `%{name}` defined twice")));
        }
        let stored = if name.bytes().all(|b| b.is_ascii_digit()) {
            None
        } else {
            Some(name.to_string())
        };
        let id = self.func.add_value(ty, stored);
        self.scopes.last_mut().unwrap().insert(name.to_string(), id);
        Ok(id)
    }

    fn lookup(&self, name: &str) -> Option<ValueId> {
        self.scopes.iter().rev().find_map(|s| s.get(name).copied())
    }

    fn operand(&mut self) -> PResult<ValueId> {
        match self.peek().clone() {
            Tok::Value(v) => {
                let id = self
                    .lookup(&v)
                    .ok_or_else(|| self.err_here(format!("use of undefined value `%{v}`")))?;
                self.next();
                Ok(id)
            }
            _ => Err(self.unexpected("a value")),
        }
    }

    fn operand_list(&mut self, close: &str) -> PResult<Vec<ValueId>> {
        let mut out = Vec::new();
        if matches!(self.peek(), Tok::Punct(p) if *p == close) {
            return Ok(out);
        }
        out.push(self.operand()?);
        while self.eat(",") {
            out.push(self.operand()?);
        }
        Ok(out)
    }

    fn axis_list(&mut self) -> PResult<Vec<String>> {
        self.expect("[")?;
        let mut out = Vec::new();
        if !self.eat("]") {
            loop {
                out.push(self.string()?);
                if self.eat("]") {
                    break;
                }
                self.expect(",")?;
            }
        }
        Ok(out)
    }

    fn axes_per_dim(&mut self) -> PResult<AxesPerDim> {
        self.expect("[")?;
        let mut out = Vec::new();
        if !self.eat("]") {
            loop {
                out.push(self.axis_list()?);
                if self.eat("]") {
                    break;
                }
                self.expect(",")?;
            }
        }
        Ok(out)
    }

    fn opt_monoid(&mut self) -> PResult<Monoid> {
        if self.eat("<") {
            let m = self.monoid()?;
            self.expect(">")?;
            Ok(m)
        } else {
            Ok(Monoid::Sum)
        }
    }

    fn monoid(&mut self) -> PResult<Monoid> {
        match self.ident()?.as_str() {
            "sum" => Ok(Monoid::Sum),
            "max" => Ok(Monoid::Max),
            m => Err(self.err_here(format!("unknown monoid `{m}`"))),
        }
    }

    fn action(&mut self) -> PResult<Action> {
        let a = match self.peek().clone() {
            Tok::Action(a) => a,
            _ => return Err(self.unexpected("a loop action")),
        };
        let act = match a.as_str() {
            "any" => Some(Action::Any),
            "sum" | "sum<sum>" => Some(Action::Sum(Monoid::Sum)),
            "sum<max>" => Some(Action::Sum(Monoid::Max)),
            s => s
                .strip_prefix("tile<")
                .and_then(|r| r.strip_suffix('>'))
                .and_then(|d| d.trim().parse().ok())
                .map(Action::Tile),
        };
        let act = act.ok_or_else(|| self.err_here(format!("unknown action `#{a}`")))?;
        self.next();
        Ok(act)
    }

    fn attr_value(&mut self) -> PResult<Attr> {
        match self.next() {
            Tok::Int(i) => Ok(Attr::Int(i)),
            Tok::Float(f) => Ok(Attr::Float(f)),
            Tok::Str(s) => Ok(Attr::Str(s)),
            Tok::Ident(s) => Ok(Attr::Ident(s)),
            Tok::Punct("[") => {
                let mut out = Vec::new();
                if !self.eat("]") {
                    loop {
                        out.push(self.attr_value()?);
                        if self.eat("]") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                Ok(Attr::List(out))
            }
            _ => {
                self.pos -= 1;
                Err(self.unexpected("an attribute value"))
            }
        }
    }

    fn attrs(&mut self) -> PResult<Vec<(String, Attr, (usize, usize))>> {
        let mut out = Vec::new();
        if !self.eat("{") {
            return Ok(out);
        }
        loop {
            let at = (self.toks[self.pos].line, self.toks[self.pos].col);
            let k = self.ident()?;
            self.expect("=")?;
            let v = self.attr_value()?;
            out.push((k, v, at));
            if self.eat("}") {
                break;
            }
            self.expect(",")?;
        }
        Ok(out)
    }

    fn op_kind(&mut self, name: &str, at: (usize, usize)) -> PResult<OpKind> {
        let at_err = |m: String| ParseError {
            line: at.0,
            col: at.1,
            message: m,
        };
        let attrs = self.attrs()?;
        let get = |k: &str| attrs.iter().find(|(n, _, _)| n == k).map(|(_, v, _)| v.clone());
        for (k, _, pos) in &attrs {
            let allowed: &[&str] = match name {
                "constant" => &["value"],
                "transpose" => &["perm"],
                "reduce" => &["dims", "monoid"],
                "broadcast" => &["dims"],
                "tag" => &["name"],
                _ => &[],
            };
            if !allowed.contains(&k.as_str()) {
                return Err(ParseError {
                    line: pos.0,
                    col: pos.1,
                    message: format!("unknown attribute `{k}` on `{name}`"),
                });
            }
        }
        let usizes = |k: &str| -> PResult<Vec<usize>> {
            match get(k) {
                Some(Attr::List(items)) => items
                    .iter()
                    .map(|a| match a {
                        Attr::Int(i) if *i >= 0 => Ok(*i as usize),
                        _ => Err(at_err(format!("`{k}` must be a list of non-negative integers"))),
                    })
                    .collect(),
                _ => Err(at_err(format!("`{name}` requires attribute `{k}` = [..]"))),
            }
        };
        let num = |a: &Attr| match a {
            Attr::Int(i) => Some(*i as f64),
            Attr::Float(f) => Some(*f),
            _ => None,
        };
        Ok(match name {
            "constant" => match get("value") {
                Some(Attr::List(items)) => ConstValue::Dense(
                    items
                        .iter()
                        .map(|a| num(a).ok_or_else(|| at_err("constant values must be numbers".into())))
                        .collect::<PResult<_>>()?,
                )
                .into(),
                Some(a) => ConstValue::Splat(num(&a).ok_or_else(|| at_err("constant value must be a number".into()))?).into(),
                None => return Err(at_err("`constant` requires attribute `value`".into())),
            },
            "matmul" => OpKind::Matmul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "neg" => OpKind::Neg,
            "exp" => OpKind::Exp,
            "reshape" => OpKind::Reshape,
            "transpose" => OpKind::Transpose { perm: usizes("perm")? },
            "reduce" => OpKind::Reduce {
                dims: usizes("dims")?,
                monoid: match get("monoid") {
                    None => Monoid::Sum,
                    Some(Attr::Ident(m)) if m == "sum" => Monoid::Sum,
                    Some(Attr::Ident(m)) if m == "max" => Monoid::Max,
                    Some(_) => return Err(at_err("`monoid` must be `sum` or `max`".into())),
                },
            },
            "broadcast" => OpKind::Broadcast { dims: usizes("dims")? },
            "tag" => match get("name") {
                Some(Attr::Str(s)) => OpKind::Tag { name: s },
                _ => return Err(at_err("`tag` requires attribute `name` = \"..\"".into())),
            },
            other => return Err(at_err(format!("unknown op `{other}`"))),
        })
    }

    /// Parses statements until `terminator`, returning the ops and the
    /// terminator's operands.
    fn block(&mut self, terminator: &str) -> PResult<(Vec<Op>, Vec<ValueId>)> {
        let mut ops = Vec::new();
        loop {
            if self.eat_ident(terminator) {
                let vals = self.operand_list("}")?;
                self.expect("}")?;
                return Ok((ops, vals));
            }
            ops.push(self.stmt()?);
        }
    }

    fn stmt(&mut self) -> PResult<Op> {
        let mut names = Vec::new();
        let first_pos = (self.toks[self.pos].line, self.toks[self.pos].col);
        loop {
            match self.peek().clone() {
                Tok::Value(v) => {
                    self.next();
                    names.push(v);
                }
                _ => return Err(self.unexpected("a result name, `return` or `yield`")),
            }
            if !self.eat(",") {
                break;
            }
        }
        self.expect("=")?;
        let at = (self.toks[self.pos].line, self.toks[self.pos].col);
        let opname = self.ident()?;
        let (kind, operands) = match opname.as_str() {
            "loop" => {
                let axis = self.string()?;
                self.expect("[")?;
                let mut actions = vec![self.action()?];
                while self.eat(",") {
                    actions.push(self.action()?);
                }
                self.expect("]")?;
                self.expect("(")?;
                let rname = match self.next() {
                    Tok::Value(v) => v,
                    _ => {
                        self.pos -= 1;
                        return Err(self.unexpected("a range argument"));
                    }
                };
                self.expect(":")?;
                let rty = self.ty()?;
                if !matches!(rty, Type::Range(_)) {
                    return Err(self.err_here("loop argument must have a range type"));
                }
                self.expect(")")?;
                self.expect("{")?;
                self.scopes.push(HashMap::new());
                let r = self.define(&rname, rty)?;
                let (ops, yields) = self.block("yield")?;
                self.scopes.pop();
                if yields.len() != actions.len() {
                    return Err(ParseError {
                        line: at.0,
                        col: at.1,
                        message: format!(
                            "loop has {} actions but yields {} values",
                            actions.len(),
                            yields.len()
                        ),
                    });
                }
                let body = Region {
                    args: vec![r],
                    ops,
                    yields,
                };
                (OpKind::Loop { axis, actions, body }, vec![])
            }
            "slice" => {
                let dim = self.usize()?;
                let x = self.operand()?;
                self.expect("[")?;
                let r = self.operand()?;
                self.expect("]")?;
                (OpKind::Slice { dim }, vec![x, r])
            }
            "all_reduce" => {
                let monoid = self.opt_monoid()?;
                let axes = self.axis_list()?;
                (OpKind::AllReduce { axes, monoid }, vec![self.operand()?])
            }
            "all_slice" => {
                let axes = self.axes_per_dim()?;
                (OpKind::AllSlice { axes }, vec![self.operand()?])
            }
            "all_gather" => {
                let axes = self.axes_per_dim()?;
                (OpKind::AllGather { axes }, vec![self.operand()?])
            }
            "all_to_all" => {
                let gather_dim = self.usize()?;
                self.expect("->")?;
                let slice_dim = self.usize()?;
                let axes = self.axis_list()?;
                (
                    OpKind::AllToAll {
                        gather_dim,
                        slice_dim,
                        axes,
                    },
                    vec![self.operand()?],
                )
            }
            "reduce_scatter" => {
                let monoid = self.opt_monoid()?;
                let axes = self.axis_list()?;
                let slice = self.axes_per_dim()?;
                (
                    OpKind::ReduceScatter {
                        axes,
                        monoid,
                        slice,
                    },
                    vec![self.operand()?],
                )
            }
            _ => {
                self.expect("(")?;
                let operands = self.operand_list(")")?;
                self.expect(")")?;
                (self.op_kind(&opname, at)?, operands)
            }
        };
        self.expect(":")?;
        let tys = self.types()?;
        if tys.len() != names.len() {
            return Err(ParseError {
                line: first_pos.0,
                col: first_pos.1,
                message: format!("{} results but {} types", names.len(), tys.len()),
            });
        }
        let mut results = Vec::new();
        for (n, t) in names.iter().zip(tys) {
            if !matches!(t, Type::Tensor(_)) {
                return Err(self.err_here("op results must be tensors"));
            }
            results.push(self.define(n, t)?);
        }
        Ok(Op {
            kind,
            operands,
            results,
        })
    }

    fn func(&mut self) -> PResult<Func> {
        if !self.eat_ident("func") {
            return Err(self.unexpected("`func`"));
        }
        let name = match self.next() {
            Tok::Symbol(s) => s,
            _ => {
                self.pos -= 1;
                return Err(self.unexpected("a function name `@name`"));
            }
        };
        self.func = Func::new(name);
        self.scopes = vec![HashMap::new()];
        self.expect("(")?;
        let mut args = Vec::new();
        if !self.eat(")") {
            loop {
                let n = match self.next() {
                    Tok::Value(v) => v,
                    _ => {
                        self.pos -= 1;
                        return Err(self.unexpected("an argument name"));
                    }
                };
                self.expect(":")?;
                let t = self.tensor_ty()?;
                args.push(self.define(&n, Type::Tensor(t))?);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect("->")?;
        let declared: Vec<Type> = if self.eat("(") {
            let mut out = Vec::new();
            if !self.eat(")") {
                out = self.types()?;
                self.expect(")")?;
            }
            out
        } else {
            self.types()?
        };
        self.expect("{")?;
        let ret_at = self.pos;
        let (ops, yields) = self.block("return")?;
        let got: Vec<Type> = yields.iter().map(|&v| self.func.ty(v).clone()).collect();
        if got != declared {
            let s = &self.toks[ret_at.max(self.pos - 1)];
            return Err(ParseError {
                line: s.line,
                col: s.col,
                message: format!(
                    "return types [{}] do not match declared [{}]",
                    join(&got),
                    join(&declared)
                ),
            });
        }
        let mut f = std::mem::replace(&mut self.func, Func::new(""));
        f.body = Region { args, ops, yields };
        Ok(f)
    }
}

fn join(ts: &[Type]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

impl From<ConstValue> for OpKind {
    fn from(c: ConstValue) -> Self {
        OpKind::Constant(c)
    }
}

/// Parses a module: an optional `mesh = {..}` header followed by functions.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        func: Func::new(""),
        scopes: Vec::new(),
    };
    let mut module = Module::default();
    if p.eat_ident("mesh") {
        p.expect("=")?;
        let at = p.err_here("");
        p.expect("{")?;
        let mut axes = Vec::new();
        if !p.eat("}") {
            loop {
                let n = p.ident()?;
                p.expect(":")?;
                let s = p.usize()?;
                axes.push((n, s));
                if p.eat("}") {
                    break;
                }
                p.expect(",")?;
            }
        }
        module.mesh = Some(Mesh::new(axes).map_err(|e| ParseError {
            message: e.to_string(),
            ..at
        })?);
    }
    while *p.peek() != Tok::Eof {
        let f = p.func()?;
        if module.funcs.iter().any(|g| g.name == f.name) {
            return Err(p.err_here(format!("function `@{}` defined twice", f.name)));
        }
        module.funcs.push(f);
    }
    if module.funcs.is_empty() {
        return Err(p.err_here("module has no functions"));
    }
    Ok(module)
}
