"""Q-network architectures.

Every network maps a batch of per-intersection feature rows ``(B, n, d)`` to
branch scores ``(B, nb, K)``.  A branch is either one intersection choosing
among ``m`` phases (unified decoder) or a group of intersections choosing one
of ``m**g`` joint phase combinations.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .. import tensor as T

KINDS = ("egu", "concat", "gcn_joint", "independent")


@dataclass(frozen=True)
class QNetworkSpec:
    """Architecture description.

    kind:
      ``egu``          GCN encoder, per-node shared trunk, n x m head
      ``concat``       flat concatenation, trunk, n x m head (no graph encoder)
      ``gcn_joint``    GCN encoder, shared trunk over group embeddings, m**g head
      ``independent``  one stacked network per group, m**g head (MARL)
    """

    kind: str
    n: int
    m: int
    node_width: int
    groups: tuple[tuple[int, ...], ...] = ()
    gcn_sizes: tuple[int, ...] = (32, 32)
    hidden: tuple[int, ...] = (128, 64)
    head: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.kind in ("gcn_joint", "independent"):
            if not self.groups:
                raise ValueError(f"{self.kind} needs intersection groups")
            members = sorted(i for g in self.groups for i in g)
            if members != list(range(self.n)):
                raise ValueError("groups must tile the intersections exactly once")

    @property
    def uses_graph(self) -> bool:
        return self.kind in ("egu", "gcn_joint")

    @property
    def group_width(self) -> int:
        return max(len(g) for g in self.groups) if self.groups else 1

    @property
    def n_branches(self) -> int:
        return self.n if self.kind in ("egu", "concat") else len(self.groups)

    @property
    def branch_size(self) -> int:
        return self.m if self.kind in ("egu", "concat") else self.m ** self.group_width


def _dense_shapes(prefix, sizes, stack=None):
    out = {}
    for k in range(len(sizes) - 1):
        w = (sizes[k], sizes[k + 1])
        b = (1, sizes[k + 1]) if stack is not None else (sizes[k + 1],)
        if stack is not None:
            w, b = (stack,) + w, (stack,) + b
        out[f"{prefix}W{k}"] = w
        out[f"{prefix}b{k}"] = b
    return out


def param_shapes(spec: QNetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d = spec.node_width
    if spec.uses_graph:
        sizes = (d,) + tuple(spec.gcn_sizes)
        for k in range(len(spec.gcn_sizes)):
            shapes[f"gcn{k}"] = (sizes[k], sizes[k + 1])
        emb = sizes[-1]
    else:
        emb = d
    head = (spec.branch_size,) if spec.head else ()
    if spec.kind == "egu":
        shapes.update(_dense_shapes("", (emb,) + spec.hidden + head))
    elif spec.kind == "concat":
        out = (spec.n * spec.m,) if spec.head else ()
        shapes.update(_dense_shapes("", (spec.n * emb,) + spec.hidden + out))
    elif spec.kind == "gcn_joint":
        shapes.update(_dense_shapes("", (spec.group_width * emb,) + spec.hidden + head))
    else:
        shapes.update(
            _dense_shapes("", (spec.group_width * emb,) + spec.hidden + head, stack=len(spec.groups))
        )
    return shapes


def count_parameters(spec: QNetworkSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def init_params(spec: QNetworkSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = T.glorot(rng, shape)
    return params


def branch_tables(spec: QNetworkSpec, phase_counts):
    """Per-branch validity mask ``(nb, K)``, member lists and joint decode table.

    ``decode[k]`` lists the member phases encoded by joint index ``k``
    (digit ``j`` for member ``j``, little-endian base ``m``).
    """
    phase_counts = np.asarray(phase_counts)
    m = spec.m
    if spec.kind in ("egu", "concat"):
        mask = np.arange(m)[None, :] < phase_counts[:, None]
        members = [(i,) for i in range(spec.n)]
        return mask, members, np.arange(m)[:, None]
    g = spec.group_width
    decode = np.array([combo[::-1] for combo in product(range(m), repeat=g)], dtype=np.int64)
    mask = np.zeros((len(spec.groups), m ** g), dtype=bool)
    for b, grp in enumerate(spec.groups):
        ok = np.ones(m ** g, dtype=bool)
        for j in range(g):
            limit = phase_counts[grp[j]] if j < len(grp) else 1
            ok &= decode[:, j] < limit
        mask[b] = ok
    return mask, [tuple(grp) for grp in spec.groups], decode


def encode_branch_actions(spec: QNetworkSpec, phases: np.ndarray) -> np.ndarray:
    """Per-intersection phases ``(..., n)`` -> branch action indices ``(..., nb)``."""
    phases = np.asarray(phases, dtype=np.int64)
    if spec.kind in ("egu", "concat"):
        return phases
    out = np.zeros(phases.shape[:-1] + (len(spec.groups),), dtype=np.int64)
    for b, grp in enumerate(spec.groups):
        for j, i in enumerate(grp):
            out[..., b] += phases[..., i] * spec.m ** j
    return out


def _mlp(h, params, n_layers, last_linear):
    for k in range(n_layers):
        rectify = k < n_layers - 1 or not last_linear
        h = T.dense_forward(h, params[f"W{k}"], params[f"b{k}"], rectify=rectify)
    return h


def forward(spec: QNetworkSpec, params: dict, X, A_hat=None) -> T.Tensor:
    """Scores ``(B, nb, K)`` for node rows ``X`` of shape ``(B, n, d)``."""
    X = T.as_tensor(X)
    if X.data.ndim == 2:
        X = T.reshape(X, (1,) + X.shape)
    B, n, d = X.shape
    if n != spec.n or d != spec.node_width:
        raise T.ShapeError(f"network expects rows (B, {spec.n}, {spec.node_width}), got {X.shape}")
    h = X
    if spec.uses_graph:
        if A_hat is None:
            raise ValueError("graph encoder needs an adjacency matrix")
        for k in range(len(spec.gcn_sizes)):
            h = T.gcn_layer(h, A_hat, params[f"gcn{k}"])
    n_layers = len(spec.hidden) + (1 if spec.head else 0)
    if spec.kind == "egu":
        return _mlp(h, params, n_layers, spec.head)
    if spec.kind == "concat":
        out = _mlp(T.reshape(h, (B, -1)), params, n_layers, spec.head)
        return T.reshape(out, (B, spec.n, spec.m)) if spec.head else out
    # grouped kinds: gather member rows, zero-padding short groups
    g = spec.group_width
    idx = np.array([list(grp) + [grp[0]] * (g - len(grp)) for grp in spec.groups])
    pad = np.array([[1.0] * len(grp) + [0.0] * (g - len(grp)) for grp in spec.groups])
    G = len(spec.groups)
    rows = T.gather(h, idx, axis=1)  # (B, G, g, e)
    if (pad < 1).any():
        rows = T.mul(rows, pad[None, :, :, None])
    rows = T.reshape(rows, (B, G, -1))
    if spec.kind == "gcn_joint":
        return _mlp(rows, params, n_layers, spec.head)
    # stacked independent nets: (G, B, in) @ (G, in, out)
    out = _mlp(T.transpose(rows, (1, 0, 2)), params, n_layers, spec.head)
    return T.transpose(out, (1, 0, 2))
