"""Actor-critic variant sharing the graph encoder and unified decoder."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..netmodel import Scenario, compute_adjacency
from .baselines import ActionMatrix
from .config import AgentConfig
from .replay import Batch


class ACNet:
    """GCN encoder and per-node trunk feeding a masked softmax policy row per
    intersection and a scalar state value from the mean node embedding."""

    def __init__(self, params: dict, A_hat, phase_counts, n_gcn: int, n_trunk: int):
        self.params = params
        self.A_hat = A_hat
        self.phase_counts = np.asarray(phase_counts, dtype=np.int64)
        m = params["Wp"].shape[1]
        self.phase_mask = np.arange(m)[None, :] < self.phase_counts[:, None]
        self.n_gcn = n_gcn
        self.n_trunk = n_trunk

    def forward(self, X, params=None):
        p = params if params is not None else {k: T.Tensor(v) for k, v in self.params.items()}
        h = T.as_tensor(X)
        if h.data.ndim == 2:
            h = T.reshape(h, (1,) + h.shape)
        for k in range(self.n_gcn):
            h = T.gcn_layer(h, self.A_hat, p[f"gcn{k}"])
        for k in range(self.n_trunk):
            h = T.dense_forward(h, p[f"W{k}"], p[f"b{k}"], rectify=True)
        logits = T.dense_forward(h, p["Wp"], p["bp"])
        value = T.dense_forward(T.mean(h, axis=1), p["Wv"], p["bv"])
        return logits, T.reshape(value, (-1,))

    def policy(self, rows) -> np.ndarray:
        logits, _ = self.forward(rows[None])
        return T.masked_softmax(logits, self.phase_mask).data[0]

    def action_matrix(self, rows) -> ActionMatrix:
        return ActionMatrix.greedy(self.policy(rows), self.phase_mask)

    def sample_action(self, rows, rng: np.random.Generator) -> np.ndarray:
        probs = self.policy(rows)
        u = rng.random(probs.shape[0])
        chosen = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
        # guard against round-off landing past the last valid phase
        return np.minimum(chosen, self.phase_counts - 1)


def build_acnet(config: AgentConfig, scenario: Scenario, rng: np.random.Generator) -> ACNet:
    net = scenario.network
    m = net.max_phase_count
    lanes = max(len(x.incoming_lane_ids) for x in net.intersections)
    sizes = (2 * lanes + m,) + tuple(config.gcn_sizes)
    params = {}
    for k in range(len(config.gcn_sizes)):
        params[f"gcn{k}"] = T.glorot(rng, (sizes[k], sizes[k + 1]))
    trunk = (sizes[-1],) + tuple(config.hidden)
    for k in range(len(config.hidden)):
        params[f"W{k}"] = T.glorot(rng, (trunk[k], trunk[k + 1]))
        params[f"b{k}"] = np.zeros(trunk[k + 1])
    params["Wp"] = T.glorot(rng, (trunk[-1], m))
    params["bp"] = np.zeros(m)
    params["Wv"] = T.glorot(rng, (trunk[-1], 1))
    params["bv"] = np.zeros(1)
    A_hat = compute_adjacency(net, config.normalization, config.use_edge_weights).normalized
    return ACNet(params, A_hat, [x.phase_count for x in net.intersections],
                 len(config.gcn_sizes), len(config.hidden))


def actor_critic_loss(net: ACNet, params: dict, batch: Batch, gamma: float, reward_scale: float = 1.0,
                      entropy_coef: float = 0.01, value_coef: float = 0.5):
    """Policy-gradient + value regression - entropy bonus, with TD(0) advantages."""
    logits, value = net.forward(batch.states, params)
    _, v_next = net.forward(batch.next_states)
    target = batch.rewards * reward_scale + gamma * np.where(batch.dones, 0.0, v_next.data)
    adv = target - value.data
    logp = T.masked_log_softmax(logits, net.phase_mask)
    logp_a = T.sum_(T.take_last(logp, batch.actions), axis=1)
    pg = T.mul(T.mean(T.mul(logp_a, adv)), -1.0)
    probs = T.masked_softmax(logits, net.phase_mask)
    entropy = T.mul(T.sum_(T.mul(probs, logp)), -1.0 / len(batch))
    v_loss = T.mean(T.square(T.add(value, -target)))
    loss = T.add(T.add(pg, T.mul(v_loss, value_coef)), T.mul(entropy, -entropy_coef))
    return loss, pg


def actor_critic_update(net: ACNet, batch: Batch, gamma: float, opt, reward_scale: float = 1.0,
                        entropy_coef: float = 0.01, value_coef: float = 0.5) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    params = {k: T.parameter(v, k) for k, v in net.params.items()}
    loss, _ = actor_critic_loss(net, params, batch, gamma, reward_scale, entropy_coef, value_coef)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite actor-critic loss")
    loss.backward()
    T.optimizer_step(net.params, {k: p.grad for k, p in params.items()}, opt)
    return float(loss.data)
