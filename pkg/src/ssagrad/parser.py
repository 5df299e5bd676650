"""Textual IR parser.

Grammar sketch (whitespace-insensitive, // comments):

    module := func*
    func   := "func" "@" ident "(" params? ")" "->" results "{" block+ "}"
    params := "%" ident ":" type ("," ...)*
    results:= type | "(" ")" | "(" type ("," type)* ")" | type ("," type)*
    type   := "f64" | "bool" | "i64" | "tape" | "tapes" "<" int ">"
            | "tensor<" int ("x" int)* "xf64>"
    block  := "^" ident ("(" params ")")? ":" instr* term
    instr  := "%" ident "=" "const" type payload
            | "%" ident "=" opname operands? attrs?
    term   := "ret" operands? | "jmp" "^" ident args?
            | "br" "%" ident "," "^" ident args? "," "^" ident args?
    attrs  := "{" ident "=" value ("," ...)* "}"

Value names resolve in a second phase, so textually forward references
parse fine and are left for the verifier's dominance check to judge.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .ir import (
    BOOL,
    F64,
    I64,
    TAPE,
    Block,
    Br,
    FnRef,
    Function,
    Instruction,
    Jmp,
    Module,
    Ret,
    Type,
    tapes_type,
    tensor_type,
)


class ParseError(Exception):
    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"line {line}:{col}: {message}")
        self.line = line
        self.col = col
        self.message = message


_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+|//[^\n]*)
    | (?P<tensor>tensor<[0-9]+(?:x[0-9]+)*xf64>)
    | (?P<num>-?[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?|-inf)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<arrow>->)
    | (?P<punct>[@%^(){}\[\],:=<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # "tensor" | "num" | "ident" | "arrow" | "punct" | "eof"
    text: str
    line: int
    col: int


def _lex(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, bol = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(line, pos - bol + 1, f"unexpected character {src[pos]!r}")
        kind = m.lastgroup or ""
        text = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, text, line, m.start() - bol + 1))
        nl = text.count("\n")
        if nl:
            line += nl
            bol = m.start() + text.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, len(src) - bol + 1))
    return toks


# Raw (unresolved) forms built during the first phase.


@dataclass
class _RawInstr:
    result: str
    op: str
    operands: list[str]
    attrs: dict[str, object]
    line: int
    col: int


@dataclass
class _RawBlock:
    name: str
    params: list[tuple[str, Type]]
    body: list[_RawInstr] = field(default_factory=list)
    term: tuple | None = None  # ("ret", names) | ("jmp", tgt, names) | ("br", ...)
    tline: int = 0
    tcol: int = 0


class _Parser:
    def __init__(self, src: str):
        self.toks = _lex(src)
        self.i = 0

    # ------------------------------------------------- token helpers

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg: str, tok: _Tok | None = None):
        t = tok or self.peek()
        raise ParseError(t.line, t.col, msg)

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text or t.kind == "eof":
            got = "end of input" if t.kind == "eof" else repr(t.text)
            self.error(f"expected {text!r}, got {got}")
        return self.next()

    def expect_ident(self, what: str) -> _Tok:
        t = self.peek()
        if t.kind != "ident":
            self.error(f"expected {what}")
        return self.next()

    def at(self, text: str) -> bool:
        return self.peek().text == text and self.peek().kind != "eof"

    # ------------------------------------------------------- pieces

    def parse_type(self) -> Type:
        t = self.peek()
        if t.kind == "tensor":
            dims = [int(d) for d in t.text[len("tensor<"):-len("xf64>")].split("x")]
            self.next()
            if any(d < 1 for d in dims):
                self.error("tensor extents must be positive", t)
            return tensor_type(*dims)
        if t.text == "f64":
            self.next()
            return F64
        if t.text == "bool":
            self.next()
            return BOOL
        if t.text == "i64":
            self.next()
            return I64
        if t.text == "tape":
            self.next()
            return TAPE
        if t.text == "tapes":
            self.next()
            self.expect("<")
            lanes = self.parse_int("lane count")
            self.expect(">")
            return tapes_type(lanes)
        self.error("unknown type literal")
        raise AssertionError

    def parse_int(self, what: str) -> int:
        t = self.peek()
        if t.kind != "num" or not re.fullmatch(r"-?[0-9]+", t.text):
            self.error(f"expected integer {what}")
        self.next()
        return int(t.text)

    def parse_float(self) -> float:
        t = self.peek()
        if t.kind == "num":
            self.next()
            return float(t.text)
        if t.kind == "ident" and t.text in ("inf", "nan"):
            self.next()
            return float(t.text)
        self.error("expected number")
        raise AssertionError

    def parse_value_name(self) -> str:
        self.expect("%")
        return self.expect_ident("value name").text

    def parse_operand_names(self) -> list[str]:
        names = [self.parse_value_name()]
        while self.at(","):
            self.next()
            names.append(self.parse_value_name())
        return names

    def parse_params(self) -> list[tuple[str, Type]]:
        params: list[tuple[str, Type]] = []
        if not self.at("%"):
            return params
        while True:
            name = self.parse_value_name()
            self.expect(":")
            params.append((name, self.parse_type()))
            if not self.at(","):
                return params
            self.next()

    def parse_attr_value(self) -> object:
        t = self.peek()
        if t.text == "@":
            self.next()
            return FnRef(self.expect_ident("function name").text)
        if t.text == "[":
            self.next()
            dims = []
            while not self.at("]"):
                dims.append(self.parse_int("extent"))
                if self.at(","):
                    self.next()
            self.expect("]")
            return tuple(dims)
        if t.text == "true":
            self.next()
            return True
        if t.text == "false":
            self.next()
            return False
        if t.kind == "num" and re.fullmatch(r"-?[0-9]+", t.text):
            self.next()
            return int(t.text)
        if t.kind == "tensor" or t.text in ("f64", "bool", "i64", "tape", "tapes"):
            return self.parse_type()
        if t.kind == "ident":
            self.next()
            return t.text
        self.error("expected attribute value")
        raise AssertionError

    def parse_attrs(self) -> dict[str, object]:
        attrs: dict[str, object] = {}
        self.expect("{")
        while not self.at("}"):
            key = self.expect_ident("attribute name").text
            self.expect("=")
            attrs[key] = self.parse_attr_value()
            if self.at(","):
                self.next()
        self.expect("}")
        return attrs

    def parse_const_payload(self, ty: Type, tok: _Tok) -> object:
        if ty.kind == "f64":
            return self.parse_float()
        if ty.kind == "i64":
            return self.parse_int("constant")
        if ty.kind == "bool":
            t = self.next()
            if t.text == "true":
                return True
            if t.text == "false":
                return False
            self.error("expected true or false", t)
        if ty.is_tensor:
            self.expect("[")
            vals = []
            while not self.at("]"):
                vals.append(self.parse_float())
                if self.at(","):
                    self.next()
            self.expect("]")
            return tuple(vals)
        self.error(f"constants of type {ty} are not allowed", tok)
        raise AssertionError

    # ----------------------------------------------- blocks and funcs

    def parse_instr(self) -> _RawInstr:
        start = self.peek()
        result = self.parse_value_name()
        self.expect("=")
        op_tok = self.expect_ident("op name")
        op = op_tok.text
        if op == "const":
            ty = self.parse_type()
            value = self.parse_const_payload(ty, op_tok)
            return _RawInstr(result, op, [], {"ty": ty, "value": value}, start.line, start.col)
        # operands live on the op's line; a % opening the next line is the
        # next instruction (matters for zero-operand ops like tape_new)
        has_operands = self.at("%") and self.peek().line == op_tok.line
        operands = self.parse_operand_names() if has_operands else []
        attrs = self.parse_attrs() if self.at("{") else {}
        return _RawInstr(result, op, operands, attrs, start.line, start.col)

    def parse_block_ref(self) -> tuple[str, list[str]]:
        self.expect("^")
        name = self.expect_ident("block name").text
        args: list[str] = []
        if self.at("("):
            self.next()
            if self.at("%"):
                args = self.parse_operand_names()
            self.expect(")")
        return name, args

    def parse_terminator(self) -> tuple:
        t = self.peek()
        if t.text == "ret":
            self.next()
            values = self.parse_operand_names() if self.at("%") else []
            return ("ret", values)
        if t.text == "jmp":
            self.next()
            name, args = self.parse_block_ref()
            return ("jmp", name, args)
        if t.text == "br":
            self.next()
            cond = self.parse_value_name()
            self.expect(",")
            t_name, t_args = self.parse_block_ref()
            self.expect(",")
            e_name, e_args = self.parse_block_ref()
            return ("br", cond, t_name, t_args, e_name, e_args)
        self.error("expected a terminator (ret, jmp or br)")
        raise AssertionError

    def parse_block(self, is_entry: bool) -> _RawBlock:
        self.expect("^")
        name_tok = self.expect_ident("block name")
        params: list[tuple[str, Type]] = []
        if self.at("("):
            if is_entry:
                self.error(
                    "entry block takes its parameters from the function header",
                    name_tok,
                )
            self.next()
            params = self.parse_params()
            self.expect(")")
        self.expect(":")
        block = _RawBlock(name_tok.text, params)
        while self.at("%"):
            block.body.append(self.parse_instr())
        ttok = self.peek()
        block.term = self.parse_terminator()
        block.tline, block.tcol = ttok.line, ttok.col
        return block

    def parse_results(self) -> tuple[Type, ...]:
        if self.at("("):
            self.next()
            if self.at(")"):
                self.next()
                return ()
            tys = [self.parse_type()]
            while self.at(","):
                self.next()
                tys.append(self.parse_type())
            self.expect(")")
            return tuple(tys)
        tys = [self.parse_type()]
        while self.at(","):
            self.next()
            tys.append(self.parse_type())
        return tuple(tys)

    def parse_function(self) -> Function:
        self.expect("func")
        self.expect("@")
        name = self.expect_ident("function name").text
        self.expect("(")
        header_params = self.parse_params()
        self.expect(")")
        self.expect("->")
        results = self.parse_results()
        self.expect("{")
        raw_blocks: list[_RawBlock] = []
        seen_blocks: set[str] = set()
        while not self.at("}"):
            tok = self.peek()
            block = self.parse_block(is_entry=not raw_blocks)
            if block.name in seen_blocks:
                self.error(f"redefinition of block ^{block.name}", tok)
            seen_blocks.add(block.name)
            raw_blocks.append(block)
        self.expect("}")
        raw_blocks[0].params = header_params
        return self.resolve(name, results, raw_blocks)

    def resolve(self, name: str, results: tuple[Type, ...], raw: list[_RawBlock]) -> Function:
        fn = Function(name, results)
        ids: dict[str, int] = {}

        def define(vname: str, where: _RawInstr | None = None) -> int:
            if vname in ids:
                line = where.line if where else 0
                col = where.col if where else 0
                raise ParseError(line, col, f"redefinition of %{vname}")
            vid = fn.new_value(vname)
            ids[vname] = vid
            return vid

        # definitions first, in textual order
        for rb in raw:
            for pname, _ in rb.params:
                define(pname)
            for ri in rb.body:
                define(ri.result, ri)

        def use(vname: str, ri: _RawInstr | None = None) -> int:
            if vname not in ids:
                line = ri.line if ri else 0
                col = ri.col if ri else 0
                raise ParseError(line, col, f"use of undefined value %{vname}")
            return ids[vname]

        block_names = {rb.name for rb in raw}
        for rb in raw:
            block = Block(rb.name, [(ids[p], t) for p, t in rb.params])
            for ri in rb.body:
                block.body.append(
                    Instruction(ids[ri.result], ri.op, tuple(use(n, ri) for n in ri.operands), ri.attrs)
                )
            term = rb.term
            assert term is not None
            if term[0] == "ret":
                block.term = Ret(tuple(use(n) for n in term[1]))
            elif term[0] == "jmp":
                if term[1] not in block_names:
                    raise ParseError(rb.tline, rb.tcol, f"jump to unknown block ^{term[1]}")
                block.term = Jmp(term[1], tuple(use(n) for n in term[2]))
            else:
                _, cond, tn, ta, en, ea = term
                for tgt in (tn, en):
                    if tgt not in block_names:
                        raise ParseError(rb.tline, rb.tcol, f"branch to unknown block ^{tgt}")
                block.term = Br(use(cond), tn, tuple(use(n) for n in ta), en, tuple(use(n) for n in ea))
            fn.blocks.append(block)
        return fn

    def parse_module(self) -> Module:
        module = Module()
        if not self.at("func"):
            self.error("expected 'func'")
        while self.peek().kind != "eof":
            tok = self.peek()
            fn = self.parse_function()
            if fn.name in module.functions:
                self.error(f"duplicate function name @{fn.name}", tok)
            module.add(fn)
            if self.peek().kind != "eof" and not self.at("func"):
                self.error("expected 'func' or end of input")
        return module


def parse_ir(text: str) -> Module:
    """Parse module text; raises ParseError with line and column."""
    return _Parser(text).parse_module()
