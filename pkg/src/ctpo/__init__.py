"""Continuous-time reinforcement learning with occupation-measure machinery.

Subpackages by responsibility:

- `ctpo.sde`: controlled-SDE environments and Euler-Maruyama rollouts;
- `ctpo.policies`: Gaussian-linear and bounded Beta network policies;
- `ctpo.critic`: value approximators, TD updates, advantage-rate estimates;
- `ctpo.occupation`: discounted occupation-time sampling and the Monte
  Carlo verification machinery (performance-difference identity, surrogate
  objective, coupled moment bounds);
- `ctpo.lq`: closed-form linear-quadratic oracle;
- `ctpo.algorithms`: policy-gradient and adaptive-KL proximal training
  loops plus discrete-time baselines;
- `ctpo.harness`: configuration, seeded experiment runs, CSV metrics.
"""

from . import algorithms, critic, harness, lq, nets, occupation, policies, rng, sde

__all__ = ["algorithms", "critic", "harness", "lq", "nets", "occupation",
           "policies", "rng", "sde"]

__version__ = "0.1.0"
