"""Multi-intersection traffic signal control: microsimulator, MDP environment and learners."""

__version__ = "0.1.0"
