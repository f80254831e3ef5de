"""Globally shared obstruction field with illumination-aware gating.

A single hash-encoded 2D field over image coordinates (u, v) models the
windshield layer for every frame. Frame dependence enters only through
the camera position: two small MLPs produce a scaling gate (1 + raw) and
an offset gate applied elementwise to the encoded features before a
sigmoid decoder maps them to premultiplied obstruction RGB. With gating
disabled the decode is position-independent — one shared image.

The decoder output learns opacity-premultiplied obstruction (phi folded
in), so the compose step adds it directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashgrid import HashGridConfig, HashGridState, encode, encode_backward
from .mlp import MlpWeights, mlp_backward, mlp_forward
from ..splat.gaussians import sigmoid

DECODER_BIAS_INIT = -4.0  # sigmoid(-4) ~ 0.018: obstruction starts near-black


@dataclass
class ObstructionField:
    grid: HashGridState
    omega_mlp: MlpWeights   # scaling gate, raw output; omega = 1 + raw
    beta_mlp: MlpWeights    # offset gate
    decoder: MlpWeights     # features -> RGB logits (sigmoid outside)
    bbox_min: np.ndarray    # scene bounds for normalizing camera positions
    bbox_max: np.ndarray
    gated: bool = True      # False: decode features directly (no position input)

    @classmethod
    def create(cls, rng: np.random.Generator, bbox_min, bbox_max,
               grid_config: HashGridConfig | None = None, hidden: int = 32,
               gated: bool = True, dtype=np.float32) -> "ObstructionField":
        cfg = grid_config or HashGridConfig()
        d_feat = cfg.feature_dim
        d_gate_in = 3 + d_feat
        return cls(
            grid=HashGridState.create(cfg, rng, dtype=dtype),
            omega_mlp=MlpWeights.create([d_gate_in, hidden, hidden, d_feat], rng,
                                        final_zero=True, dtype=dtype),
            beta_mlp=MlpWeights.create([d_gate_in, hidden, hidden, d_feat], rng,
                                       final_zero=True, dtype=dtype),
            decoder=MlpWeights.create([d_feat, hidden, hidden, 3], rng,
                                      final_zero=True, final_bias=DECODER_BIAS_INIT,
                                      dtype=dtype),
            bbox_min=np.asarray(bbox_min, dtype=np.float64),
            bbox_max=np.asarray(bbox_max, dtype=np.float64),
            gated=gated,
        )

    @property
    def dtype(self):
        return self.grid.tables[0].dtype

    def astype(self, dtype) -> "ObstructionField":
        return ObstructionField(
            grid=HashGridState(self.grid.config, [t.astype(dtype) for t in self.grid.tables]),
            omega_mlp=self.omega_mlp.astype(dtype),
            beta_mlp=self.beta_mlp.astype(dtype),
            decoder=self.decoder.astype(dtype),
            bbox_min=self.bbox_min, bbox_max=self.bbox_max, gated=self.gated,
        )

    def normalize_position(self, position: np.ndarray) -> np.ndarray:
        span = np.maximum(self.bbox_max - self.bbox_min, 1e-9)
        return np.clip((np.asarray(position, dtype=np.float64) - self.bbox_min) / span,
                       0.0, 1.0).astype(self.dtype)

    def params(self) -> dict:
        """Live parameter arrays keyed by path; optimizer mutates them in place."""
        out = {}
        for l, t in enumerate(self.grid.tables):
            out[f"hash/table{l}"] = t
        for name, mlp in (("omega", self.omega_mlp), ("beta", self.beta_mlp),
                          ("decoder", self.decoder)):
            for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}/W{k}"] = W
                out[f"{name}/b{k}"] = b
        return out


@dataclass
class FieldCache:
    uv: np.ndarray
    feats: np.ndarray
    enc_cache: object
    gate_input: np.ndarray | None
    omega_cache: object | None
    beta_cache: object | None
    omega: np.ndarray | None
    modulated: np.ndarray
    dec_cache: object
    out: np.ndarray


def lim_gates(field: ObstructionField, position: np.ndarray, feats: np.ndarray):
    """Scaling/offset gates from camera position and encoded features."""
    pos = np.broadcast_to(field.normalize_position(position), (len(feats), 3))
    gate_input = np.concatenate([pos.astype(feats.dtype), feats], axis=1)
    raw_omega, omega_cache = mlp_forward(gate_input, field.omega_mlp, with_cache=True)
    beta, beta_cache = mlp_forward(gate_input, field.beta_mlp, with_cache=True)
    omega = 1.0 + raw_omega
    return omega, beta, gate_input, omega_cache, beta_cache


def obstruction_color(uv: np.ndarray, position: np.ndarray,
                      field: ObstructionField, with_cache: bool = False):
    """Premultiplied obstruction RGB at image points `uv` for a camera at `position`."""
    feats, enc_cache = encode(uv, field.grid, with_cache=True)
    if field.gated:
        omega, beta, gate_input, omega_cache, beta_cache = lim_gates(
            field, position, feats)
        modulated = omega * feats + beta
    else:
        omega = beta = gate_input = omega_cache = beta_cache = None
        modulated = feats
    logits, dec_cache = mlp_forward(modulated, field.decoder, with_cache=True)
    out = sigmoid(logits)
    if with_cache:
        return out, FieldCache(uv=uv, feats=feats, enc_cache=enc_cache,
                               gate_input=gate_input, omega_cache=omega_cache,
                               beta_cache=beta_cache, omega=omega,
                               modulated=modulated, dec_cache=dec_cache, out=out)
    return out


@dataclass
class FieldGrads:
    tables: list
    omega_w: list
    omega_b: list
    beta_w: list
    beta_b: list
    decoder_w: list
    decoder_b: list

    @classmethod
    def zeros_like(cls, field: ObstructionField) -> "FieldGrads":
        zmlp = lambda m: ([np.zeros_like(W) for W in m.weights],
                          [np.zeros_like(b) for b in m.biases])
        ow, ob = zmlp(field.omega_mlp)
        bw, bb = zmlp(field.beta_mlp)
        dw, db = zmlp(field.decoder)
        return cls(tables=field.grid.zeros_like_tables(),
                   omega_w=ow, omega_b=ob, beta_w=bw, beta_b=bb,
                   decoder_w=dw, decoder_b=db)

    def as_dict(self) -> dict:
        out = {}
        for l, t in enumerate(self.tables):
            out[f"hash/table{l}"] = t
        for name, (ws, bs) in (("omega", (self.omega_w, self.omega_b)),
                               ("beta", (self.beta_w, self.beta_b)),
                               ("decoder", (self.decoder_w, self.decoder_b))):
            for k in range(len(ws)):
                out[f"{name}/W{k}"] = ws[k]
                out[f"{name}/b{k}"] = bs[k]
        return out

    def accumulate(self, other: "FieldGrads") -> None:
        a, b = self.as_dict(), other.as_dict()
        for k in a:
            a[k] += b[k]


def obstruction_color_backward(field: ObstructionField, cache: FieldCache,
                               d_out: np.ndarray) -> FieldGrads:
    """Gradients w.r.t. hash tables, gate MLPs, and decoder weights."""
    grads = FieldGrads.zeros_like(field)
    d_logits = d_out * cache.out * (1.0 - cache.out)
    d_mod, dec_w, dec_b = mlp_backward(field.decoder, cache.dec_cache, d_logits)
    grads.decoder_w, grads.decoder_b = dec_w, dec_b

    if field.gated:
        d_omega = d_mod * cache.feats
        d_beta = d_mod
        d_feats = d_mod * cache.omega
        d_gate_in_o, om_w, om_b = mlp_backward(field.omega_mlp, cache.omega_cache,
                                               d_omega)
        d_gate_in_b, be_w, be_b = mlp_backward(field.beta_mlp, cache.beta_cache,
                                               d_beta)
        grads.omega_w, grads.omega_b = om_w, om_b
        grads.beta_w, grads.beta_b = be_w, be_b
        # features also feed the gate MLPs through the concatenated input
        d_feats = d_feats + d_gate_in_o[:, 3:] + d_gate_in_b[:, 3:]
    else:
        d_feats = d_mod

    grads.tables = encode_backward(field.grid, cache.enc_cache, d_feats)
    return grads
