"""Endorsement policies: parsing, evaluation, and random endorser selection.

Grammar (keywords case-insensitive, whitespace free-form)::

    Expr := AND '(' Expr {',' Expr} ')'
          | OR '(' Expr {',' Expr} ')'
          | OutOf '(' int ',' Expr {',' Expr} ')'
          | "'" OrgId ".member'"
"""
from __future__ import annotations

import random
import re
from collections.abc import Collection
from dataclasses import dataclass
from typing import Union


class PolicySyntaxError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} at position {position}")
        self.position = position


class PolicyTopologyError(ValueError):
    """Policy references an organization the topology does not have."""


@dataclass(frozen=True)
class Principal:
    org_id: str


@dataclass(frozen=True)
class And:
    children: tuple["Policy", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Policy", ...]


@dataclass(frozen=True)
class OutOf:
    k: int
    children: tuple["Policy", ...]

    def __post_init__(self) -> None:
        if not 1 <= self.k <= len(self.children):
            raise ValueError(
                f"OutOf k={self.k} outside 1..{len(self.children)}"
            )


Policy = Union[Principal, And, Or, OutOf]


@dataclass(frozen=True)
class Topology:
    """Organizations in order, each with its list of peer ids."""

    orgs: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        if not self.orgs:
            raise ValueError("topology needs at least one organization")
        seen: set[str] = set()
        for org_id, peers in self.orgs:
            if not peers:
                raise ValueError(f"organization {org_id} has no peers")
            for p in peers:
                if p in seen:
                    raise ValueError(f"duplicate peer id {p}")
                seen.add(p)

    @classmethod
    def uniform(cls, n_orgs: int, peers_per_org: int) -> "Topology":
        return cls.from_counts([peers_per_org] * n_orgs)

    @classmethod
    def from_counts(cls, counts: list[int]) -> "Topology":
        """Orgs named Org1..OrgN with peers Peer{j}.ORG{i}."""
        return cls(
            tuple(
                (f"Org{i}", tuple(f"Peer{j}.ORG{i}" for j in range(m)))
                for i, m in enumerate(counts, start=1)
            )
        )

    @property
    def n_orgs(self) -> int:
        return len(self.orgs)

    @property
    def peer_counts(self) -> list[int]:
        return [len(p) for _, p in self.orgs]

    @property
    def org_ids(self) -> list[str]:
        return [o for o, _ in self.orgs]

    def peers_of(self, org_id: str) -> tuple[str, ...]:
        for o, peers in self.orgs:
            if o == org_id:
                return peers
        raise PolicyTopologyError(f"unknown organization {org_id!r}")

    def org_of(self, peer_id: str) -> str:
        for o, peers in self.orgs:
            if peer_id in peers:
                return o
        raise KeyError(peer_id)

    def all_peers(self) -> list[str]:
        return [p for _, peers in self.orgs for p in peers]


# -- parsing ----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<kw>out-?of|and|or)\b|(?P<int>\d+)|'(?P<org>[^'.]+)\.member'|(?P<punct>[(),]))",
    re.IGNORECASE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise PolicySyntaxError(f"unexpected input {text[start:start + 10]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str) -> None:
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None) -> tuple[str, str, int]:
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of input"
            raise PolicySyntaxError(f"expected {want!r}, found {got!r}", tok[2])
        self.i += 1
        return tok

    def expr(self) -> Policy:
        kind, value, pos = self.peek()
        if kind == "org":
            self.i += 1
            return Principal(value)
        if kind != "kw":
            raise PolicySyntaxError(f"expected policy expression, found {value or 'end of input'!r}", pos)
        self.i += 1
        keyword = value.lower().replace("-", "")
        self.take("punct", "(")
        k = None
        if keyword == "outof":
            _, raw_k, k_pos = self.take("int")
            k = int(raw_k)
            self.take("punct", ",")
        children = [self.expr()]
        while self.peek()[:2] == ("punct", ","):
            self.i += 1
            children.append(self.expr())
        self.take("punct", ")")
        if keyword == "and":
            return And(tuple(children))
        if keyword == "or":
            return Or(tuple(children))
        if not 1 <= k <= len(children):
            raise PolicySyntaxError(
                f"OutOf k={k} must be between 1 and {len(children)}", k_pos
            )
        return OutOf(k, tuple(children))


def parse_policy(text: str) -> Policy:
    parser = _Parser(text)
    policy = parser.expr()
    parser.take("end")
    return policy


def format_policy(policy: Policy) -> str:
    if isinstance(policy, Principal):
        return f"'{policy.org_id}.member'"
    inner = ",".join(format_policy(c) for c in policy.children)
    if isinstance(policy, And):
        return f"AND({inner})"
    if isinstance(policy, Or):
        return f"OR({inner})"
    return f"OutOf({policy.k},{inner})"


def principals(policy: Policy) -> set[str]:
    if isinstance(policy, Principal):
        return {policy.org_id}
    out: set[str] = set()
    for child in policy.children:
        out |= principals(child)
    return out


def check_against(policy: Policy, topology: Topology) -> None:
    missing = principals(policy) - set(topology.org_ids)
    if missing:
        raise PolicyTopologyError(
            f"policy references unknown organizations: {sorted(missing)}"
        )


# -- evaluation and selection ---------------------------------------------


def is_satisfied(policy: Policy, endorsing_orgs: Collection[str]) -> bool:
    if isinstance(policy, Principal):
        return policy.org_id in endorsing_orgs
    hits = sum(is_satisfied(c, endorsing_orgs) for c in policy.children)
    if isinstance(policy, And):
        return hits == len(policy.children)
    if isinstance(policy, Or):
        return hits >= 1
    return hits >= policy.k


def select_endorsers(
    policy: Policy, topology: Topology, rng: random.Random
) -> set[str]:
    """Draw a minimal satisfying set of peers, choosing uniformly at each branch."""
    if isinstance(policy, Principal):
        return {rng.choice(topology.peers_of(policy.org_id))}
    if isinstance(policy, Or):
        return select_endorsers(rng.choice(policy.children), topology, rng)
    if isinstance(policy, OutOf):
        chosen = rng.sample(policy.children, policy.k)
    else:
        chosen = policy.children
    out: set[str] = set()
    for child in chosen:
        out |= select_endorsers(child, topology, rng)
    return out


def simple_kind(policy: Policy) -> str | None:
    """'And' / 'Or' for flat policies over distinct principals, else None.

    Only these shapes have closed-form non-detection probabilities.
    """
    if isinstance(policy, (And, Or)) and all(
        isinstance(c, Principal) for c in policy.children
    ):
        orgs = [c.org_id for c in policy.children]
        if len(set(orgs)) == len(orgs):
            return "And" if isinstance(policy, And) else "Or"
    return None
