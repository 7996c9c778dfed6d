"""Off-policy actor-critic with model-generated on-policy corrections, plus linear TD stability tools."""

__version__ = "0.1.0"
