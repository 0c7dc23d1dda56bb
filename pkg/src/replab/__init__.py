"""replab: a desk-scale laboratory for block-replacement training.

Train CNN/ViT backbones where every K-th block is physically removed and
substituted by a lightweight computing layer whose operator is synthesized
from the neighboring blocks' parameters, then verify the cost, error, and
deploy-time re-parameterization claims with exact counters and oracles.
"""

from .builder import NetworkSpec, RemovalPlan, StageSpec, build_network, build_pair
from .tensor import Parameter, Tensor

__all__ = [
    "NetworkSpec",
    "RemovalPlan",
    "StageSpec",
    "build_network",
    "build_pair",
    "Parameter",
    "Tensor",
]
