"""Backbone + prompt configuration bundled into one callable model."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import CacheStore, FrozenBackbone, SyntheticInstance
from .mpf import forward_dual_encoder, predict
from .objectives import Adapters, cc_loss, ce_loss, total_loss
from .state import PromptConfig, PromptState, init_state
from .tensor import Tensor


class MuGCP:
    """Prompted dual encoder over a frozen backbone.

    Holds the offline KV-cache store, so caches built in one epoch are reused
    in every later epoch and at evaluation.
    """

    def __init__(self, backbone: FrozenBackbone, config: PromptConfig | None = None,
                 cache: CacheStore | None = None):
        self.backbone = backbone
        self.config = config or PromptConfig()
        self.cache = cache if cache is not None else CacheStore()
        self.config.insertion_layers(backbone.config.depth)

    def init_state(self, seed: int) -> PromptState:
        return init_state(self.backbone, self.config, seed)

    def encode(self, state: Mapping[str, Tensor], inst: SyntheticInstance,
               classes: Sequence[int]) -> tuple[Tensor, Tensor]:
        return forward_dual_encoder(self.backbone, state, inst, classes, self.config, self.cache)

    def probabilities(self, state, inst, classes, use_adapters: bool | None = None) -> np.ndarray:
        use_adapters = self.config.eval_with_adapters if use_adapters is None else use_adapters
        f, t = self.encode(state, inst, classes)
        if use_adapters:
            ad = Adapters.from_mapping(state)
            f, t = ad.image(f), ad.text(t)
        return predict(f, t, self.config.tau).data

    def predict_class(self, state, inst, classes) -> int:
        return int(classes[int(np.argmax(self.probabilities(state, inst, classes)))])

    def loss(self, state, inst: SyntheticInstance, classes: Sequence[int], t_prime, f_prime,
             lam: float) -> tuple[Tensor, Tensor, Tensor]:
        """(total, cross-entropy, consistency) for one instance."""
        target = list(classes).index(inst.class_id)
        f, t = self.encode(state, inst, classes)
        ad = Adapters.from_mapping(state)
        f_a, t_a = ad.image(f), ad.text(t)
        ce = ce_loss(f_a, t_a, target, None, self.config.tau)
        cc = cc_loss(T.as_tensor(t_prime), t_a[target], T.as_tensor(f_prime), f_a)
        return total_loss(ce, cc, lam), ce, cc
