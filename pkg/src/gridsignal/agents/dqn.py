"""Factored double-DQN over branch-structured Q networks."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..netmodel import Scenario, compute_adjacency, group_intersections
from .baselines import ActionMatrix, random_valid
from .config import AgentConfig
from .networks import (
    QNetworkSpec,
    branch_tables,
    encode_branch_actions,
    forward,
    init_params,
    param_shapes,
)
from .replay import Batch


class QNet:
    """A network spec bound to parameters, adjacency and branch tables."""

    def __init__(self, spec: QNetworkSpec, params: dict, A_hat, phase_counts):
        self.spec = spec
        self.params = params
        self.A_hat = A_hat
        self.phase_counts = np.asarray(phase_counts, dtype=np.int64)
        self.branch_mask, self.members, self.decode = branch_tables(spec, phase_counts)
        self.phase_mask = np.arange(spec.m)[None, :] < self.phase_counts[:, None]

    def clone(self) -> "QNet":
        return QNet(self.spec, {k: v.copy() for k, v in self.params.items()}, self.A_hat, self.phase_counts)

    def forward(self, X) -> T.Tensor:
        return forward(self.spec, {k: T.Tensor(v) for k, v in self.params.items()}, X, self.A_hat)

    def scores(self, X) -> np.ndarray:
        """Branch scores ``(B, nb, K)`` as a plain array."""
        return self.forward(X).data

    def action_matrix(self, rows) -> ActionMatrix:
        """Greedy action matrix for one state of node rows ``(n, d)``."""
        q = self.scores(rows[None])[0]
        if self.spec.kind in ("egu", "concat"):
            return ActionMatrix.greedy(q, self.phase_mask)
        # joint heads: score of phase p at member j = best valid combination using it
        n, m = self.spec.n, self.spec.m
        values = np.full((n, m), -np.inf)
        qm = np.where(self.branch_mask, q, -np.inf)
        for b, grp in enumerate(self.members):
            for j, i in enumerate(grp):
                for p in range(self.phase_counts[i]):
                    values[i, p] = qm[b, self.decode[:, j] == p].max()
        am = ActionMatrix.greedy(np.where(self.phase_mask, values, 0.0), self.phase_mask)
        # decode the joint argmax so the group's choice stays consistent
        best = T.masked_row_argmax(q, self.branch_mask)
        for b, grp in enumerate(self.members):
            am.chosen[list(grp)] = self.decode[best[b], :len(grp)]
        return am


def build_qnet(config: AgentConfig, scenario: Scenario, rng: np.random.Generator) -> QNet:
    net = scenario.network
    n, m = net.n_intersections, net.max_phase_count
    lanes = max(len(x.incoming_lane_ids) for x in net.intersections)
    width = 2 * lanes + m
    if config.variant == "marl_s":
        spec = QNetworkSpec("independent", n, m, 2 * lanes, tuple((i,) for i in range(n)),
                            hidden=config.hidden)
    elif config.variant == "marl_g":
        groups = tuple(map(tuple, group_intersections(net, config.group_size)))
        spec = QNetworkSpec("independent", n, m, 2 * lanes, groups, hidden=config.hidden)
    elif config.variant == "egu_rl":
        if config.use_usd:
            kind = "egu" if config.use_ege else "concat"
            groups = ()
        else:
            kind = "gcn_joint" if config.use_ege else "independent"
            groups = tuple(map(tuple, group_intersections(net, config.group_size)))
        spec = QNetworkSpec(kind, n, m, width, groups, gcn_sizes=config.gcn_sizes,
                            hidden=config.hidden)
    else:
        raise ValueError(f"{config.variant} has no Q network")
    A_hat = None
    if spec.uses_graph:
        A_hat = compute_adjacency(net, config.normalization, config.use_edge_weights).normalized
    phase_counts = [x.phase_count for x in net.intersections]
    return QNet(spec, init_params(spec, rng), A_hat, phase_counts)


def epsilon_at(config: AgentConfig, learn_steps: int) -> float:
    return max(config.epsilon_min, config.epsilon_start * config.epsilon_decay ** learn_steps)


def select_action(scores: ActionMatrix, epsilon: float, rng: np.random.Generator) -> ActionMatrix:
    """Per intersection: a uniformly random valid phase with probability epsilon, else the greedy one."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    explore = rng.random(scores.n) < epsilon
    rand = random_valid(scores.mask, rng)
    chosen = np.where(explore, rand, scores.chosen)
    return ActionMatrix(scores.values, scores.mask, chosen)


def td_update(net: QNet, target_net: QNet, batch: Batch, gamma: float, opt,
              reward_scale: float = 1.0) -> float:
    """One factored double-DQN step; returns the loss before the update.

    Each branch b of each transition regresses onto
    ``r + gamma * Q_target(s', b, argmax_k Q_online(s', b, k))``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    spec = net.spec
    params = {k: T.parameter(v, k) for k, v in net.params.items()}
    q = forward(spec, params, batch.states, net.A_hat)
    acts = encode_branch_actions(spec, batch.actions)
    q_sa = T.take_last(q, acts)

    best = T.masked_row_argmax(net.scores(batch.next_states), net.branch_mask)
    q_next = np.take_along_axis(target_net.scores(batch.next_states), best[..., None], axis=-1)[..., 0]
    y = (batch.rewards * reward_scale)[:, None] + gamma * np.where(batch.dones[:, None], 0.0, q_next)

    loss = T.mean(T.square(T.add(q_sa, -y)))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite TD loss")
    loss.backward()
    T.optimizer_step(net.params, {k: p.grad for k, p in params.items()}, opt)
    return float(loss.data)


def sync_target(net: QNet, target_net: QNet, step: int, every: int = 100) -> bool:
    """Copy online parameters into the target every ``every`` learning steps."""
    if step > 0 and step % every == 0:
        for k, v in net.params.items():
            target_net.params[k][...] = v
        return True
    return False


def expected_shapes(net: QNet) -> dict:
    return param_shapes(net.spec)
