from __future__ import annotations

from dataclasses import asdict, dataclass

VARIANTS = ("random", "fixed", "auction", "marl_s", "marl_g", "egu_rl")
LEARNED = ("marl_s", "marl_g", "egu_rl")


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "egu_rl"
    use_usd: bool = True
    use_ege: bool = True
    use_edge_weights: bool = True
    learner: str = "dqn"
    gamma: float = 0.9
    lr: float = 1e-3
    epsilon_start: float = 0.5
    epsilon_decay: float = 0.99999
    epsilon_min: float = 0.01
    batch: int = 150
    replay_capacity: int = 2000
    target_sync: int = 100
    hidden: tuple[int, ...] = (128, 64)
    gcn_sizes: tuple[int, ...] = (32, 32)
    group_size: int = 3
    alpha: float = 1.0
    # rewards are multiplied by this inside the learner only
    reward_scale: float = 0.01
    normalization: str = "rownorm(A+I)"
    fixed_dwell: int = 30
    auction_probes: int = 16
    auction_normalizer: float = 10.0
    # actor-critic
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    ac_batch: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.learner not in ("dqn", "actor_critic"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.learner == "actor_critic" and (self.variant != "egu_rl" or not (self.use_ege and self.use_usd)):
            raise ValueError("the actor-critic learner is only defined for the full egu_rl network")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if not 0 < self.epsilon_decay <= 1:
            raise ValueError("epsilon_decay must lie in (0, 1]")
        if self.batch < 1 or self.replay_capacity < self.batch:
            raise ValueError("need 1 <= batch <= replay_capacity")
        if self.target_sync < 1 or self.group_size < 1:
            raise ValueError("target_sync and group_size must be >= 1")
        if self.fixed_dwell < 1 or self.auction_probes < 1:
            raise ValueError("fixed_dwell and auction_probes must be >= 1")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be > 0")

    @property
    def learned(self) -> bool:
        return self.variant in LEARNED

    @property
    def label(self) -> str:
        suffix = "" if self.alpha == 1.0 else f"_alpha{self.alpha:g}"
        if self.variant != "egu_rl":
            return self.variant + suffix
        if self.learner == "actor_critic":
            return "egu_rl_ac" + suffix
        off = [name for name, on in (("usd", self.use_usd), ("ege", self.use_ege), ("ew", self.use_edge_weights)) if not on]
        return "egu_rl" + "".join(f"_wo_{x}" for x in off) + suffix

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["gcn_sizes"] = list(self.gcn_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        for k in ("hidden", "gcn_sizes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)
