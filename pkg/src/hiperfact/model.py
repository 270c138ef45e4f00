"""Core data model: typed values, facts, conditions, actions, rules.

A fact is a quintuple (fact_type, id, attr, value, value_type).  The first
three components are string-dictionary handles.  The value is stored as a
64-bit pattern: the handle for strings, the two's-complement/IEEE-754 bit
image for numerics, 0/1 for booleans.  Keeping everything as unsigned
64-bit words lets facts live in flat numpy arrays and makes equality and
hashing uniform across value types.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

# Triple component positions (fact_type is not a component; it is part of
# every index key).
POS_ID = 0
POS_ATTR = 1
POS_VALUE = 2

_U32 = 0xFFFF_FFFF
_U64 = 0xFFFF_FFFF_FFFF_FFFF


class ValueType(enum.IntEnum):
    STRING = 0
    INT32 = 1
    INT64 = 2
    UINT32 = 3
    UINT64 = 4
    FLOAT = 5
    DOUBLE = 6
    BOOL = 7

    @property
    def type_name(self) -> str:
        return _TYPE_NAMES[self]

    @classmethod
    def from_name(cls, name: str) -> "ValueType":
        try:
            return _TYPES_BY_NAME[name]
        except KeyError:
            raise ValueError(f"unknown value type {name!r}") from None


_TYPE_NAMES = {
    ValueType.STRING: "string",
    ValueType.INT32: "int32",
    ValueType.INT64: "int64",
    ValueType.UINT32: "uint32",
    ValueType.UINT64: "uint64",
    ValueType.FLOAT: "float",
    ValueType.DOUBLE: "double",
    ValueType.BOOL: "bool",
}
_TYPES_BY_NAME = {name: vt for vt, name in _TYPE_NAMES.items()}

NUMERIC_TYPES = frozenset(
    {
        ValueType.INT32,
        ValueType.INT64,
        ValueType.UINT32,
        ValueType.UINT64,
        ValueType.FLOAT,
        ValueType.DOUBLE,
    }
)


def encode_value(value_type: ValueType, value) -> int:
    """Encode a Python payload as the canonical 64-bit pattern.

    For STRING the payload must already be a dictionary handle.  Numeric
    payloads are range-checked; floats are narrowed to their declared
    width first, so the stored pattern round-trips exactly.
    """
    if value_type is ValueType.STRING:
        return _check_unsigned(value, _U64, value_type)
    if value_type is ValueType.BOOL:
        return 1 if value else 0
    if value_type is ValueType.INT32:
        _check_signed(value, 31, value_type)
        return value & _U32
    if value_type is ValueType.INT64:
        _check_signed(value, 63, value_type)
        return value & _U64
    if value_type is ValueType.UINT32:
        return _check_unsigned(value, _U32, value_type)
    if value_type is ValueType.UINT64:
        return _check_unsigned(value, _U64, value_type)
    if value_type is ValueType.FLOAT:
        return struct.unpack("<I", struct.pack("<f", value))[0]
    if value_type is ValueType.DOUBLE:
        return struct.unpack("<Q", struct.pack("<d", value))[0]
    raise ValueError(f"unhandled value type {value_type!r}")


def decode_value(value_type: ValueType, bits: int):
    """Inverse of :func:`encode_value`.  STRING decodes to the handle."""
    if value_type in (ValueType.STRING, ValueType.UINT32, ValueType.UINT64):
        return bits
    if value_type is ValueType.BOOL:
        return bool(bits)
    if value_type is ValueType.INT32:
        return bits - 0x1_0000_0000 if bits & 0x8000_0000 else bits
    if value_type is ValueType.INT64:
        return bits - 0x1_0000_0000_0000_0000 if bits & 0x8000_0000_0000_0000 else bits
    if value_type is ValueType.FLOAT:
        return struct.unpack("<f", struct.pack("<I", bits))[0]
    if value_type is ValueType.DOUBLE:
        return struct.unpack("<d", struct.pack("<Q", bits))[0]
    raise ValueError(f"unhandled value type {value_type!r}")


def _check_signed(value, bits: int, vt: ValueType) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"{vt.type_name} payload must be int, got {value!r}")
    if not -(1 << bits) <= value < (1 << bits):
        raise ValueError(f"{value} out of range for {vt.type_name}")


def _check_unsigned(value, mask: int, vt: ValueType) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"{vt.type_name} payload must be int, got {value!r}")
    if not 0 <= value <= mask:
        raise ValueError(f"{value} out of range for {vt.type_name}")
    return value


class Fact(NamedTuple):
    """Immutable fact quintuple; all fields are unsigned 64-bit words."""

    fact_type: int
    id: int
    attr: int
    value_type: int
    value: int

    def component(self, pos: int) -> int:
        if pos == POS_ID:
            return self.id
        if pos == POS_ATTR:
            return self.attr
        if pos == POS_VALUE:
            return self.value
        raise ValueError(f"bad component position {pos}")


@dataclass(frozen=True)
class Variable:
    """Logical variable occurring in a condition or action template."""

    name: str

    def __repr__(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class Expr:
    """Binary arithmetic over a variable/number pair, usable in templates.

    Evaluated in double precision; the result is cast to the template's
    declared value type on fact creation.
    """

    op: str  # one of + - * /
    left: Union[Variable, float, int]
    right: Union[Variable, float, int]


# A concrete term is the already-encoded 64-bit component (a handle for
# id/attr/string slots, the bit pattern otherwise).
Term = Union[Variable, int]
TemplateTerm = Union[Variable, int, Expr]


class CompareOp(enum.Enum):
    EQ = "=="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="


@dataclass(frozen=True)
class VariableJoinTest:
    """Comparison between two bound variables, attached to a condition."""

    left: Variable
    op: CompareOp
    right: Variable


@dataclass(frozen=True)
class Condition:
    """Fact-shaped pattern.  The fact type is always concrete."""

    fact_type: int
    id: Term
    attr: Term
    value: Term
    value_type: ValueType
    tests: tuple[VariableJoinTest, ...] = ()

    def term(self, pos: int) -> Term:
        if pos == POS_ID:
            return self.id
        if pos == POS_ATTR:
            return self.attr
        if pos == POS_VALUE:
            return self.value
        raise ValueError(f"bad component position {pos}")

    def variables(self) -> list[tuple[int, Variable]]:
        """(position, variable) pairs in id, attr, value order."""
        out = []
        for pos in (POS_ID, POS_ATTR, POS_VALUE):
            t = self.term(pos)
            if isinstance(t, Variable):
                out.append((pos, t))
        return out


def condition_rank(cond: Condition) -> int:
    """Number of concrete components among id/attr/value (0..3)."""
    return sum(
        1
        for t in (cond.id, cond.attr, cond.value)
        if not isinstance(t, Variable)
    )


@dataclass(frozen=True)
class Template:
    """Condition-shaped output pattern of an action."""

    fact_type: int
    id: TemplateTerm
    attr: TemplateTerm
    value: TemplateTerm
    value_type: ValueType

    def terms(self) -> tuple[TemplateTerm, TemplateTerm, TemplateTerm]:
        return (self.id, self.attr, self.value)


class ActionKind(enum.Enum):
    ADD = "add"
    DELETE = "delete"
    REPLACE = "replace"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    template: Template
    replacement: Template | None = None  # second template of a replace


@dataclass(frozen=True)
class Rule:
    name: str
    conditions: tuple[Condition, ...]
    actions: tuple[Action, ...] = ()

    def is_query(self) -> bool:
        """A rule without fact-modifying actions only reads the store."""
        return len(self.actions) == 0

    def written_types(self) -> set[int]:
        """Fact types this rule's actions add to, delete from, or rewrite."""
        out: set[int] = set()
        for action in self.actions:
            out.add(action.template.fact_type)
            if action.replacement is not None:
                out.add(action.replacement.fact_type)
        return out

    def read_types(self) -> set[int]:
        return {c.fact_type for c in self.conditions}


@dataclass
class PlanningError(Exception):
    """Raised when a rule cannot be evaluated as written (for example a
    join between variables of different value types)."""

    message: str
    rule: str | None = None

    def __str__(self) -> str:
        if self.rule:
            return f"rule {self.rule!r}: {self.message}"
        return self.message


# Variable slot kinds for join schemas.  A variable bound at the id or attr
# position, or at a string-typed value position, carries a dictionary
# handle; joins between any two handle slots are allowed.  Numeric/bool
# variables join only within the same value type.
HANDLE_KIND = "handle"


def slot_kind(pos: int, value_type: ValueType):
    if pos in (POS_ID, POS_ATTR) or value_type is ValueType.STRING:
        return HANDLE_KIND
    return value_type


def variable_kinds(rule: Rule) -> dict[str, object]:
    """Slot kind per variable name; the first binding position wins.

    Parsing rejects rules where later bindings disagree, so any
    well-formed rule has a single kind per variable.
    """
    kinds: dict[str, object] = {}
    for cond in rule.conditions:
        for pos, var in cond.variables():
            kinds.setdefault(var.name, slot_kind(pos, cond.value_type))
    return kinds
