"""Feature tokenizer: one embedding per tabular column plus a trailing CLS token."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Parameter, Tensor


@dataclass
class FeatureSpec:
    name: str
    kind: str  # "numerical" | "categorical"
    cardinality: int = 0
    mean: float = 0.0
    std: float = 1.0
    median: float = 0.0
    categories: list[str] = field(default_factory=list)
    frequencies: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("numerical", "categorical"):
            raise ValueError(f"{self.name}: unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and self.cardinality < 1:
            raise ValueError(f"{self.name}: categorical cardinality must be >= 1")
        if self.kind == "numerical" and not self.std > 0:
            raise ValueError(f"{self.name}: constant numerical column (std = {self.std})")

    @property
    def mode(self) -> int:
        if not self.frequencies:
            return 0
        return max(sorted(self.frequencies), key=lambda k: self.frequencies[k])


@dataclass
class TabularSchema:
    features: list[FeatureSpec]

    def __post_init__(self):
        if not self.features:
            raise ValueError("schema must contain at least one feature")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def numerical_index(self) -> np.ndarray:
        return np.array([i for i, f in enumerate(self.features) if f.kind == "numerical"], dtype=np.intp)

    @property
    def categorical_index(self) -> np.ndarray:
        return np.array([i for i, f in enumerate(self.features) if f.kind == "categorical"], dtype=np.intp)

    @property
    def cardinalities(self) -> list[int]:
        return [f.cardinality for f in self.features if f.kind == "categorical"]

    def to_dict(self) -> dict:
        return {"features": [vars(f) | {"frequencies": {str(k): v for k, v in f.frequencies.items()}}
                             for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        feats = []
        for f in d["features"]:
            f = dict(f)
            f["frequencies"] = {int(k): v for k, v in f.get("frequencies", {}).items()}
            feats.append(FeatureSpec(**f))
        return cls(feats)

    @classmethod
    def simple(cls, kinds: list[str], cardinalities: dict[int, int] | None = None) -> "TabularSchema":
        """Schema with default statistics, e.g. ``simple(["numerical", "categorical"], {1: 3})``."""
        cardinalities = cardinalities or {}
        return cls([FeatureSpec(f"f{i}", k, cardinality=cardinalities.get(i, 0))
                    for i, k in enumerate(kinds)])


class FeatureTokenizer(Module):
    """Maps rows (B, N) to tokens (B, N + 1, d).

    Numerical column i becomes ``x_i * W_i + b_i``; categorical column j
    becomes ``E_j[x_j] + b_j``. Parameters are stored packed: row ``k`` of
    ``num_weight``/``num_bias`` is the k-th numerical feature and
    ``cat_table`` stacks every categorical lookup table at ``cat_offsets``.
    """

    def __init__(self, schema: TabularSchema, d: int, rng: np.random.Generator):
        self.schema = schema
        self.d = d
        self._num = schema.numerical_index
        self._cat = schema.categorical_index
        cards = schema.cardinalities
        self.cat_offsets = np.cumsum([0] + cards[:-1]).astype(np.intp) if cards else np.zeros(0, np.intp)
        s = 1.0 / np.sqrt(d)
        self.num_weight = Parameter(rng.uniform(-s, s, (len(self._num), d)))
        self.num_bias = Parameter(rng.uniform(-s, s, (len(self._num), d)))
        self.cat_table = Parameter(rng.uniform(-s, s, (int(np.sum(cards)) if cards else 0, d)))
        self.cat_bias = Parameter(rng.uniform(-s, s, (len(self._cat), d)))
        self.cls = Parameter(rng.normal(0.0, 0.02, d))  # small, so the readout reflects the row
        # schema position -> position in [numerical..., categorical...]
        self._order = np.argsort(np.concatenate([self._num, self._cat]), kind="stable")

    def validate(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != len(self.schema):
            raise ValueError(f"row has {rows.shape[-1]} values, schema has {len(self.schema)} features")
        if self._num.size and np.isnan(rows[..., self._num]).any():
            bad = self._num[np.isnan(rows[..., self._num]).reshape(-1, self._num.size).any(axis=0)][0]
            raise ValueError(f"feature {self.schema.features[bad].name!r}: NaN value (impute upstream)")
        for k, i in enumerate(self._cat):
            col = rows[..., i]
            card = self.schema.features[i].cardinality
            if np.isnan(col).any() or (col < 0).any() or (col >= card).any() or (col != np.round(col)).any():
                raise ValueError(f"feature {self.schema.features[i].name!r}: category index out of "
                                 f"range [0, {card})")

    def forward(self, rows) -> Tensor:
        """rows: (B, N) array or Tensor (numerical columns may carry gradients)."""
        x = rows if isinstance(rows, Tensor) else Tensor(rows)
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (1, -1))
        self.validate(x.data)
        B = x.shape[0]
        parts = []
        if self._num.size:
            xn = T.take(x, self._num, axis=1)
            parts.append(T.feature_scale(xn, self.num_weight) + self.num_bias)
        if self._cat.size:
            codes = x.data[:, self._cat].astype(np.intp) + self.cat_offsets
            parts.append(T.embedding(self.cat_table, codes) + self.cat_bias)
        tokens = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        if self._num.size and self._cat.size:
            tokens = T.take(tokens, self._order, axis=1)
        cls = T.broadcast_to(T.reshape(self.cls, (1, self.d)), (B, 1, self.d))
        out = T.concat([tokens, cls], axis=1)
        return T.reshape(out, out.shape[1:]) if single else out

    def feature_parameters(self, i: int) -> dict[str, np.ndarray]:
        """Views of the parameter group belonging to schema feature ``i``."""
        spec = self.schema.features[i]
        if spec.kind == "numerical":
            k = int(np.searchsorted(self._num, i))
            return {"weight": self.num_weight.data[k], "bias": self.num_bias.data[k]}
        k = int(np.searchsorted(self._cat, i))
        lo = self.cat_offsets[k]
        return {"table": self.cat_table.data[lo:lo + spec.cardinality], "bias": self.cat_bias.data[k]}

    def feature_grads(self, i: int) -> list[np.ndarray]:
        spec = self.schema.features[i]
        zeros = lambda p: p.grad if p.grad is not None else np.zeros(p.shape)  # noqa: E731
        if spec.kind == "numerical":
            k = int(np.searchsorted(self._num, i))
            return [zeros(self.num_weight)[k], zeros(self.num_bias)[k]]
        k = int(np.searchsorted(self._cat, i))
        lo = self.cat_offsets[k]
        return [zeros(self.cat_table)[lo:lo + spec.cardinality], zeros(self.cat_bias)[k]]


def tokenize(row, schema: TabularSchema, params: FeatureTokenizer) -> Tensor:
    """Tokenize a single row of length N into (N + 1, d) tokens."""
    if params.schema is not schema and params.schema.names != schema.names:
        raise ValueError("tokenizer parameters were built for a different schema")
    return params(np.asarray(row, dtype=np.float64).reshape(-1))


def corrupt_tabular(rows: np.ndarray, rate: float, rng: np.random.Generator,
                    train_pool: np.ndarray) -> np.ndarray:
    """Replace each entry with probability ``rate`` by a value of the same column
    drawn uniformly from the training split (``train_pool``, shape (n_train, N))."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"corruption rate must be in [0, 1], got {rate}")
    pool = np.asarray(train_pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("corrupt_tabular: empty train_pool")
    rows = np.asarray(rows, dtype=np.float64)
    single = rows.ndim == 1
    x = rows.reshape(-1, pool.shape[1]).copy()
    hit = rng.random(x.shape) < rate
    donors = rng.integers(0, pool.shape[0], size=x.shape)
    cols = np.broadcast_to(np.arange(x.shape[1]), x.shape)
    x[hit] = pool[donors[hit], cols[hit]]
    return x[0] if single else x
