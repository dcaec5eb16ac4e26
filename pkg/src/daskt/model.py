"""Affect-fused LSTM knowledge tracer and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .affect_cluster import NULL_AFFECT, UNASSESSED_AFFECT
from .affect_graph import (
    BIDIRECTIONAL,
    CAUSAL,
    affect_trajectory,
    batch_neighbor_mask,
    gat_layer1,
    gat_layer2,
)
from .autodiff import ParamStore, Tensor

ABLATIONS = ("full", "no_a_gat", "no_at_gat", "no_ica", "no_maf")


@dataclass
class ModelConfig:
    n_problems: int = 1
    n_kcs: int = 1
    d_p: int = 256
    d_k: int = 256
    d_r: int = 256
    d_aff: int = 256
    d: int = 256
    heads: int = 4
    head_merge: str = "mean"
    affect_source: str = "embedding"
    center_dim: int = 0
    n_affects: int = 4
    affect_lag: int = 0
    graph: str = "auto"
    ablation: str = "full"
    seed: int = 0
    lam: float = 1e-5
    lr: float = 1e-3
    clip_norm: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.head_merge not in ("mean", "concat"):
            raise ValueError(f"unknown head merge {self.head_merge!r}")
        if self.affect_source not in ("embedding", "centers"):
            raise ValueError(f"unknown affect source {self.affect_source!r}")

    @property
    def offsets(self) -> tuple[int, ...]:
        if self.graph == "auto":
            return CAUSAL if self.affect_lag > 0 else BIDIRECTIONAL
        return {"bidirectional": BIDIRECTIONAL, "causal": CAUSAL}[self.graph]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Wiring:
    uses_affect: bool
    gat_layers: int
    affect_granularity: str = "segment"

    def input_width(self, cfg: ModelConfig) -> int:
        width = cfg.d_p + cfg.d_k + cfg.d_r
        if self.uses_affect:
            width += affect_width(cfg, self)
        return width


def ablate(config: ModelConfig | str) -> Wiring:
    """Which parts of the affect path a variant keeps."""
    tag = config if isinstance(config, str) else config.ablation
    wiring = {
        "full": Wiring(True, 2),
        "no_a_gat": Wiring(True, 1),
        "no_at_gat": Wiring(True, 0),
        "no_ica": Wiring(True, 2, "sequence"),
        "no_maf": Wiring(False, 0),
    }
    if tag not in wiring:
        raise ValueError(f"unknown ablation {tag!r}")
    return wiring[tag]


def affect_width(cfg: ModelConfig, wiring: Wiring) -> int:
    if wiring.gat_layers == 1 and cfg.head_merge == "concat":
        return cfg.heads * cfg.d_aff
    return cfg.d_aff


def build_params(cfg: ModelConfig) -> ParamStore:
    """All trainable tensors. Names are stable across variants, so variants
    built with the same seed share every parameter they have in common."""
    wiring = ablate(cfg)
    ps = ParamStore(seed=cfg.seed, dtype=cfg.dtype)
    ps.uniform("P", (cfg.n_problems + 1, cfg.d_p), fan_in=cfg.d_p)
    ps.uniform("KC", (cfg.n_kcs + 1, cfg.d_k), fan_in=cfg.d_k)
    ps.uniform("R", (2, cfg.d_r), fan_in=cfg.d_r)
    if wiring.uses_affect:
        aff_in = cfg.d_aff
        if cfg.affect_source == "embedding":
            n_rows = cfg.n_affects + (1 if cfg.affect_lag > 0 else 0)
            ps.uniform("Aff", (n_rows, cfg.d_aff), fan_in=cfg.d_aff)
        else:
            aff_in = cfg.center_dim
        ps.uniform("W1", (aff_in + cfg.d_p, cfg.d_aff))
        ps.zeros("b1", (cfg.d_aff,))
        if wiring.gat_layers >= 1:
            ps.uniform("gat1.W", (cfg.d_aff, cfg.heads * cfg.d_aff))
            ps.uniform("gat1.a_src", (cfg.heads, cfg.d_aff), fan_in=cfg.d_aff)
            ps.uniform("gat1.a_dst", (cfg.heads, cfg.d_aff), fan_in=cfg.d_aff)
        if wiring.gat_layers >= 2:
            d1 = cfg.heads * cfg.d_aff if cfg.head_merge == "concat" else cfg.d_aff
            ps.uniform("gat2.W", (d1, cfg.d_aff))
            ps.uniform("gat2.a_src", (1, cfg.d_aff), fan_in=cfg.d_aff)
            ps.uniform("gat2.a_dst", (1, cfg.d_aff), fan_in=cfg.d_aff)
        ps.uniform("lstm.W_aff", (affect_width(cfg, wiring), 4 * cfg.d), fan_in=cfg.d)
    ps.uniform("lstm.W_p", (cfg.d_p, 4 * cfg.d), fan_in=cfg.d)
    ps.uniform("lstm.W_kc", (cfg.d_k, 4 * cfg.d), fan_in=cfg.d)
    ps.uniform("lstm.W_r", (cfg.d_r, 4 * cfg.d), fan_in=cfg.d)
    ps.uniform("lstm.W_h", (cfg.d, 4 * cfg.d), fan_in=cfg.d)
    ps.zeros("lstm.b", (4 * cfg.d,))
    ps.uniform("out.w", (cfg.d_p + cfg.d_k + cfg.d,), fan_in=cfg.d_p + cfg.d_k + cfg.d)
    ps.zeros("out.b", (1,))
    return ps


AFFECT_PATH_PARAMS = ("Aff", "W1", "b1", "gat1.W", "gat1.a_src", "gat1.a_dst",
                      "gat2.W", "gat2.a_src", "gat2.a_dst", "lstm.W_aff")


def zero_affect_path(params: ParamStore) -> None:
    for name in AFFECT_PATH_PARAMS:
        if name in params:
            params[name].data[...] = 0


@dataclass
class Batch:
    problems: np.ndarray
    kcs: np.ndarray
    correct: np.ndarray
    mask: np.ndarray
    affects: np.ndarray
    keys: list = field(default_factory=list)
    centers: np.ndarray | None = None

    def __len__(self) -> int:
        return self.problems.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.problems[idx], self.kcs[idx], self.correct[idx], self.mask[idx],
                     self.affects[idx], [self.keys[i] for i in idx], self.centers)

    def trimmed(self) -> "Batch":
        """Drop trailing time columns that are padding for every row."""
        lengths = self.mask.sum(axis=1)
        T = max(int(lengths.max()) if len(lengths) else 0, 2)
        return Batch(self.problems[:, :T], self.kcs[:, :T], self.correct[:, :T], self.mask[:, :T],
                     self.affects[:, :T], self.keys, self.centers)

    @property
    def target_mask(self) -> np.ndarray:
        """Prediction steps: every real step after the first."""
        return self.mask[:, 1:]

    @property
    def labels(self) -> np.ndarray:
        return self.correct[:, 1:]


def check_batch(batch: Batch, cfg: ModelConfig) -> None:
    shapes = {a.shape for a in (batch.problems, batch.kcs, batch.correct, batch.mask, batch.affects)}
    if len(shapes) != 1:
        raise ValueError(f"misaligned batch arrays: {sorted(shapes)}")
    m = batch.mask.astype(bool)
    if ablate(cfg).uses_affect and np.any(batch.affects[m] == NULL_AFFECT):
        raise ValueError("real timestep without an affect index")
    if np.any(batch.affects[m] == UNASSESSED_AFFECT) and cfg.affect_lag == 0 and \
            cfg.affect_source == "embedding" and ablate(cfg).uses_affect:
        raise ValueError("unassessed affect index only exists with a positive affect lag")


def dynamic_affect(batch: Batch, params: ParamStore, cfg: ModelConfig, return_attention=False):
    """Affect representation fed to the LSTM for the configured variant."""
    wiring = ablate(cfg)
    mask = batch.mask.astype(bool)
    rows = None
    if cfg.affect_source == "centers":
        rows = batch.centers
    atra = affect_trajectory(batch.affects, batch.problems, mask, params.params.get("Aff"),
                             params["P"], params["W1"], params["b1"], affect_rows=rows)
    nmask = batch_neighbor_mask(mask, cfg.offsets)
    attn = {}
    out = atra
    if wiring.gat_layers >= 1:
        out, attn["gat1"] = gat_layer1(atra, nmask, params, heads=cfg.heads, offsets=cfg.offsets,
                                       merge=cfg.head_merge)
    if wiring.gat_layers >= 2:
        out, attn["gat2"] = gat_layer2(out, nmask, params, offsets=cfg.offsets)
    out = ad.mul(out, mask[:, :, None].astype(out.dtype))
    return (out, attn) if return_attention else out


def forward(batch: Batch, params: ParamStore, cfg: ModelConfig, return_attention: bool = False) -> dict:
    """Run the tracer over a padded batch.

    Returns ``pred`` (B, T-1) with ``pred[:, t]`` the probability that step
    ``t + 1`` is answered correctly, plus hidden states ``h`` (B, T, d).
    """
    check_batch(batch, cfg)
    wiring = ablate(cfg)
    B, T = batch.problems.shape
    dt = np.dtype(cfg.dtype)
    Pe = ad.embedding(params["P"], batch.problems)
    Ke = ad.embedding(params["KC"], batch.kcs)
    Re = ad.embedding(params["R"], batch.correct.astype(np.int64))
    gx = ad.add(ad.matmul(Pe, params["lstm.W_p"]), ad.matmul(Ke, params["lstm.W_kc"]))
    attn = {}
    if wiring.uses_affect:
        A, attn = dynamic_affect(batch, params, cfg, return_attention=True)
        gx = ad.add(gx, ad.matmul(A, params["lstm.W_aff"]))
    gx = ad.add(gx, ad.matmul(Re, params["lstm.W_r"]))
    h = ad.as_tensor(np.zeros((B, cfg.d), dtype=dt))
    c = ad.as_tensor(np.zeros((B, cfg.d), dtype=dt))
    hs = []
    for t in range(T):
        h, c = ad.lstm_gates(gx[:, t], h, c, params["lstm.W_h"], params["lstm.b"])
        hs.append(h)
    H = ad.stack(hs, axis=1)
    feats = ad.concat([Pe[:, 1:], Ke[:, 1:], H[:, :-1]], axis=-1)
    logits = ad.add(ad.matmul(feats, params["out.w"]), params["out.b"])
    out = {"pred": ad.sigmoid(logits), "h": H}
    if return_attention:
        out["attention"] = attn
    return out


def loss_fn(out: dict, batch: Batch, params: ParamStore, cfg: ModelConfig) -> Tensor:
    return ad.bce_l2_loss(out["pred"], batch.labels, batch.target_mask, cfg.lam, list(params))


def knowledge_state_readout(h, kc_ids, params: ParamStore) -> np.ndarray:
    """Mastery probability per (timestep, KC).

    Probes the prediction head with the KC's embedding and a neutral problem
    embedding (the mean of all real problem rows) at hidden state ``h``.
    """
    h = np.atleast_2d(np.asarray(h.data if isinstance(h, Tensor) else h))
    kc_ids = np.atleast_1d(np.asarray(kc_ids))
    KC = params["KC"].data
    if kc_ids.min() < 1 or kc_ids.max() >= KC.shape[0]:
        raise ValueError("unknown KC id")
    P = params["P"].data
    d_p, d_k = P.shape[1], KC.shape[1]
    w = params["out.w"].data
    w_p, w_k, w_h = w[:d_p], w[d_p : d_p + d_k], w[d_p + d_k :]
    p_bar = P[1:].mean(axis=0)
    logits = (p_bar @ w_p) + (KC[kc_ids] @ w_k)[None, :] + (h @ w_h)[:, None] + params["out.b"].data[0]
    return 1.0 / (1.0 + np.exp(-logits))
