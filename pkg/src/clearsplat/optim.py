"""Adam with per-group learning rates over a flat dict of parameter arrays.

Parameters are keyed by slash-separated paths ("gaussians/means",
"hash/table3", "phi/logits"); the learning rate for a key is resolved by
longest matching prefix. Updates are applied in sorted key order and in
place, so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class NanGradientError(RuntimeError):
    """Raised when a gradient goes non-finite; names the parameter group."""


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)

    def ensure(self, params: dict) -> None:
        """Add zero moment buffers for keys that appeared after creation."""
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)

    def remap_rows(self, key: str, source_rows: np.ndarray) -> None:
        """Rebuild a per-row buffer after a densify event.

        source_rows[i] is the old row feeding new row i, or -1 for a fresh
        row (zero moments).
        """
        for buf in (self.m, self.v):
            old = buf[key]
            new = np.zeros((len(source_rows),) + old.shape[1:], dtype=old.dtype)
            keep = source_rows >= 0
            new[keep] = old[source_rows[keep]]
            buf[key] = new


def resolve_lr(name: str, lrs: dict) -> float:
    """Longest-prefix learning-rate lookup; exact key wins."""
    if name in lrs:
        return lrs[name]
    best, best_len = None, -1
    for prefix, lr in lrs.items():
        if name.startswith(prefix + "/") and len(prefix) > best_len:
            best, best_len = lr, len(prefix)
    if best is None:
        raise KeyError(f"no learning rate for parameter group '{name}'")
    return best


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              skip: set | None = None) -> None:
    """One update over every group present in `grads`; params mutate in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in sorted(grads):
        if skip and name in skip:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient in parameter group '{name}'")
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= resolve_lr(name, lrs) * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
