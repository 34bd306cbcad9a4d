"""Polynomial regression tasks over [-1, 1]^n with degree <= 2."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

VARIABLES = ("w", "x", "y", "z")
COEF_STD = 2.5


def monomials(n_vars: int = 4, max_degree: int = 2) -> list[tuple[int, ...]]:
    """Exponent tuples: constant, linear, squares, then cross terms."""
    out = [(0,) * n_vars]
    for d in range(1, max_degree + 1):
        pure = []
        cross = []
        for combo in itertools.combinations_with_replacement(range(n_vars), d):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            (pure if len(set(combo)) == 1 else cross).append(tuple(e))
        out += pure + cross
    return out


class NotApplicableError(ValueError):
    pass


@dataclass(frozen=True)
class Polynomial:
    """Sparse coefficient map from exponent tuples to floats."""

    n_vars: int
    coeffs: tuple  # sorted tuple of (exponents, coefficient) with nonzero coefficients

    @classmethod
    def from_dict(cls, d: dict, n_vars: int = 4) -> "Polynomial":
        items = tuple(sorted((tuple(k), float(v)) for k, v in d.items() if v != 0))
        return cls(n_vars, items)

    @classmethod
    def parse(cls, terms: dict, n_vars: int = 4) -> "Polynomial":
        """Build from names, e.g. ``{"1": 1, "x": 2, "x^2": 1, "wx": -1}``."""
        d: dict = {}
        for name, c in terms.items():
            e = [0] * n_vars
            if name != "1":
                i = 0
                while i < len(name):
                    v = VARIABLES.index(name[i])
                    if name[i + 1:i + 3] == "^2":
                        e[v] += 2
                        i += 3
                    else:
                        e[v] += 1
                        i += 1
            d[tuple(e)] = d.get(tuple(e), 0.0) + c
        return cls.from_dict(d, n_vars)

    def as_dict(self) -> dict:
        return dict(self.coeffs)

    @property
    def degree(self) -> int:
        return max((sum(e) for e, _ in self.coeffs), default=0)

    def coefficient(self, exps) -> float:
        return self.as_dict().get(tuple(exps), 0.0)

    def relevant(self, var: int) -> bool:
        return any(e[var] > 0 for e, _ in self.coeffs)

    def vector(self, basis: Sequence[tuple]) -> np.ndarray:
        d = self.as_dict()
        extra = set(d) - set(basis)
        if extra:
            raise ValueError(f"polynomial has terms outside the basis: {sorted(extra)}")
        return np.array([d.get(m, 0.0) for m in basis])

    def name(self) -> str:
        if not self.coeffs:
            return "0"
        parts = []
        for e, c in self.coeffs:
            mono = "".join(
                VARIABLES[i] + ("^2" if k == 2 else "") for i, k in enumerate(e) if k
            ) or "1"
            parts.append(f"{c:+.3g}*{mono}")
        return " ".join(parts)

    def to_json(self) -> dict:
        return {"n_vars": self.n_vars, "terms": [[list(e), c] for e, c in self.coeffs]}

    @classmethod
    def from_json(cls, obj: dict) -> "Polynomial":
        return cls.from_dict({tuple(e): c for e, c in obj["terms"]}, obj["n_vars"])


def evaluate_polynomial(p: Polynomial, point) -> np.ndarray:
    """Value at a point (shape (n,)) or at each row of an (m, n) array."""
    pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
    out = np.zeros(len(pts))
    for e, c in p.coeffs:
        term = np.full(len(pts), c)
        for i, k in enumerate(e):
            if k:
                term = term * pts[:, i] ** k
        out += term
    return out if np.ndim(point) == 2 else out[0]


def sample_polynomial(rng: np.random.Generator, n_vars: int = 4, max_degree: int = 2,
                      coef_std: float = COEF_STD) -> Polynomial:
    """Random sparse polynomial over a random subset of relevant variables."""
    k = int(rng.integers(0, n_vars + 1))
    relevant = set(rng.choice(n_vars, size=k, replace=False).tolist()) if k else set()
    coeffs = {}
    for m in monomials(n_vars, max_degree):
        if all(m[i] == 0 for i in range(n_vars) if i not in relevant):
            if rng.random() < 0.5:
                coeffs[m] = float(rng.normal(0.0, coef_std))
    return Polynomial.from_dict(coeffs, n_vars)


@dataclass
class PolyDataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def split(self, n_examples: int, rng: np.random.Generator) -> tuple["PolyDataset", "PolyDataset"]:
        """Disjoint (examples, probes) split."""
        if not 0 < n_examples < len(self):
            raise ValueError("need at least one example and one probe")
        perm = rng.permutation(len(self))
        a, b = perm[:n_examples], perm[n_examples:]
        return (PolyDataset(self.inputs[a], self.targets[a]),
                PolyDataset(self.inputs[b], self.targets[b]))


def sample_dataset(p: Polynomial, n: int, rng: np.random.Generator) -> PolyDataset:
    if n < 1:
        raise ValueError("dataset size must be positive")
    x = rng.uniform(-1.0, 1.0, size=(n, p.n_vars))
    return PolyDataset(x, evaluate_polynomial(p, x))


def _multiply(p: Polynomial, q: Polynomial) -> Polynomial:
    out: dict = {}
    for e1, c1 in p.coeffs:
        for e2, c2 in q.coeffs:
            e = tuple(a + b for a, b in zip(e1, e2))
            out[e] = out.get(e, 0.0) + c1 * c2
    return Polynomial.from_dict(out, p.n_vars)


@dataclass(frozen=True)
class PolyMetaMapping:
    """``kind`` is square, add, multiply or permute; ``param`` the constant or code."""

    kind: str
    param: float | str | None = None

    @property
    def name(self) -> str:
        if self.kind == "square":
            return "square"
        if self.kind == "permute":
            return f"permute_{self.param}"
        return f"{self.kind}_{_fmt(self.param)}"

    @classmethod
    def from_name(cls, name: str) -> "PolyMetaMapping":
        if name == "square":
            return cls("square")
        kind, _, arg = name.partition("_")
        if kind == "permute":
            return cls(kind, arg)
        return cls(kind, float(arg))


def _fmt(v) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


def apply_meta_mapping(m: PolyMetaMapping, p: Polynomial) -> Polynomial:
    if m.kind == "square":
        if p.degree > 1:
            raise NotApplicableError("square is only defined for polynomials of degree <= 1")
        return _multiply(p, p)
    if m.kind == "add":
        d = p.as_dict()
        const = (0,) * p.n_vars
        d[const] = d.get(const, 0.0) + float(m.param)
        return Polynomial.from_dict(d, p.n_vars)
    if m.kind == "multiply":
        return Polynomial.from_dict({e: c * float(m.param) for e, c in p.coeffs}, p.n_vars)
    if m.kind == "permute":
        code = [int(ch) for ch in str(m.param)]
        if sorted(code) != list(range(p.n_vars)):
            raise ValueError(f"permutation code {m.param} does not fit {p.n_vars} variables")
        # new variable i takes the role of old variable code[i]
        return Polynomial.from_dict(
            {tuple(e[code[i]] for i in range(p.n_vars)): c for e, c in p.coeffs}, p.n_vars)
    raise ValueError(f"unknown meta-mapping kind {m.kind!r}")


def inverse_permutation(code: str) -> str:
    digits = [int(c) for c in code]
    inv = [0] * len(digits)
    for i, d in enumerate(digits):
        inv[d] = i
    return "".join(map(str, inv))


def mapping_is_applicable(m: PolyMetaMapping, p: Polynomial) -> bool:
    return not (m.kind == "square" and p.degree > 1)


TRAINED_PERMUTATIONS = ("1320", "1302", "3201", "2103", "3102", "0132",
                        "2031", "3210", "2301", "1203", "1023", "2310")
HELD_OUT_PERMUTATIONS = ("0312", "0213", "0321", "3012", "1230", "1032",
                         "3021", "0231", "0123", "3120", "2130", "2013")

TRAINED_MAPPINGS = (
    [PolyMetaMapping("square")]
    + [PolyMetaMapping("add", c) for c in (-3.0, -1.0, 1.0, 3.0)]
    + [PolyMetaMapping("multiply", c) for c in (-3.0, -1.0, 3.0)]
    + [PolyMetaMapping("permute", s) for s in TRAINED_PERMUTATIONS]
)
HELD_OUT_MAPPINGS = (
    [PolyMetaMapping("add", c) for c in (2.0, -2.0)]
    + [PolyMetaMapping("multiply", c) for c in (2.0, -2.0)]
    + [PolyMetaMapping("permute", s) for s in HELD_OUT_PERMUTATIONS]
)

CLASSIFICATIONS = ("is_constant", "intercept_nonzero") + tuple(
    f"relevant_{v}" for v in VARIABLES)


def ground_truth_classification(kind: str, p: Polynomial) -> int:
    if kind == "is_constant":
        return int(p.degree == 0)
    if kind == "intercept_nonzero":
        return int(p.coefficient((0,) * p.n_vars) != 0.0)
    if kind.startswith("relevant_"):
        return int(p.relevant(VARIABLES.index(kind.split("_", 1)[1])))
    raise ValueError(f"unknown classification {kind!r}")


def meta_task_tokens(name: str) -> list[str]:
    """Unpadded language description of a meta task."""
    if name == "is_constant":
        return ["is", "constant"]
    if name == "intercept_nonzero":
        return ["is", "intercept_nonzero"]
    if name.startswith("relevant_"):
        return ["is", name.split("_", 1)[1], "relevant"]
    m = PolyMetaMapping.from_name(name)
    if m.kind == "square":
        return ["square"]
    if m.kind == "permute":
        return ["permute"] + [VARIABLES[int(c)] for c in str(m.param)]
    return [m.kind, _fmt(m.param)]


def vocabulary() -> list[str]:
    names = list(CLASSIFICATIONS) + [m.name for m in TRAINED_MAPPINGS + HELD_OUT_MAPPINGS]
    vocab = []
    for n in names:
        for t in meta_task_tokens(n):
            if t not in vocab:
                vocab.append(t)
    return vocab


MAX_TOKENS = 5


def tokenize_meta_task(m, length: int = MAX_TOKENS) -> list[str]:
    from ..nets import pad_tokens

    name = m.name if isinstance(m, PolyMetaMapping) else m
    return pad_tokens(meta_task_tokens(name), length)


def _moment(e: tuple) -> Fraction:
    # E[prod v_i^k_i] for v ~ U[-1, 1]^n
    out = Fraction(1)
    for k in e:
        out *= Fraction(0) if k % 2 else Fraction(1, k + 1)
    return out


def polynomial_mean(p: Polynomial) -> float:
    return float(sum(Fraction(c) * _moment(e) for e, c in p.coeffs))


def polynomial_variance(p: Polynomial) -> float:
    """Exact variance of p(v) under the uniform input distribution."""
    sq = _multiply(p, p)
    second = sum(Fraction(c) * _moment(e) for e, c in sq.coeffs)
    return float(second - Fraction(polynomial_mean(p)) ** 2)


@dataclass
class BaselineReport:
    mean_predictor: float
    optimal: float = 0.0
    per_task: dict = field(default_factory=dict)


def baseline_losses(polys: dict) -> BaselineReport:
    """Mean-predictor loss per task (its output variance) and the optimal loss 0."""
    per = {k: polynomial_variance(p) for k, p in polys.items()}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return BaselineReport(mean, 0.0, per)


@dataclass
class PolyTask:
    task_id: str
    poly: Polynomial
    source: str | None = None
    mapping: str | None = None
    held_out: bool = False

    def to_json(self) -> dict:
        return {"id": self.task_id, "poly": self.poly.to_json(), "source": self.source,
                "mapping": self.mapping, "held_out": self.held_out}

    @classmethod
    def from_json(cls, obj: dict) -> "PolyTask":
        return cls(obj["id"], Polynomial.from_json(obj["poly"]), obj.get("source"),
                   obj.get("mapping"), obj.get("held_out", False))


def save_inventory(path, tasks: Sequence[PolyTask], mappings: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"tasks": [t.to_json() for t in tasks], "mappings": mappings}, fh, indent=1)


def load_inventory(path) -> tuple[list[PolyTask], dict]:
    with open(path) as fh:
        obj = json.load(fh)
    return [PolyTask.from_json(t) for t in obj["tasks"]], obj["mappings"]
