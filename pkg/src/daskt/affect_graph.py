"""Affect trajectories, the per-student chain graph, and two graph-attention layers.

A student's affect graph links every timestep to itself and to its immediate
predecessor and successor. Because the structure is a chain, attention is
computed densely over the batch: neighbour ``t + o`` for each offset ``o`` is
reached by shifting along the time axis, and offsets that fall outside the
student's real steps are masked before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BIDIRECTIONAL = (-1, 0, 1)
CAUSAL = (-1, 0)
_MASKED = -1e9


@dataclass
class AffectGraph:
    n_nodes: int
    edges: list[tuple[int, int]]
    offsets: tuple[int, ...] = BIDIRECTIONAL
    student_id: str | None = None

    def in_neighbors(self, n: int) -> list[int]:
        return [src for dst, src in self.edges if dst == n]

    def neighbor_mask(self) -> np.ndarray:
        """(n_nodes, len(offsets)) bool: is node ``t + offset`` a neighbour of ``t``."""
        m = np.zeros((self.n_nodes, len(self.offsets)), dtype=bool)
        for dst, src in self.edges:
            m[dst, self.offsets.index(src - dst)] = True
        return m


def build_graph(n_nodes: int, offsets=BIDIRECTIONAL, student_id=None) -> AffectGraph:
    """Chain graph over ``n_nodes`` timesteps; edges are (node, neighbour) pairs, 0-based."""
    if n_nodes < 1:
        raise ValueError("affect graph needs at least one node")
    edges = [(t, t + o) for t in range(n_nodes) for o in offsets if 0 <= t + o < n_nodes]
    return AffectGraph(n_nodes, edges, tuple(offsets), student_id)


def batch_neighbor_mask(step_mask: np.ndarray, offsets=BIDIRECTIONAL) -> np.ndarray:
    """Neighbour mask for a padded batch ``(B, T)`` of real-step flags.

    Pad steps are excluded from every real node's neighbourhood; a pad node
    keeps only its self-loop so its (discarded) softmax stays finite.
    """
    step_mask = np.asarray(step_mask, dtype=bool)
    B, T = step_mask.shape
    out = np.zeros((B, T, len(offsets)), dtype=bool)
    for j, o in enumerate(offsets):
        nb = np.zeros_like(step_mask)
        if o >= 0:
            nb[:, : T - o] = step_mask[:, o:]
        else:
            nb[:, -o:] = step_mask[:, : T + o]
        out[:, :, j] = step_mask & nb
        if o == 0:
            out[:, :, j] |= ~step_mask
    return out


def affect_trajectory(affect_ids, problem_ids, step_mask, aff_table: Tensor, p_table: Tensor,
                      W1: Tensor, b1: Tensor, affect_rows: np.ndarray | None = None) -> Tensor:
    """Trajectory embedding ``(Aff[a_t] ++ P[p_t]) @ W1 + b1`` per timestep.

    With ``affect_rows`` given (raw cluster centers), those fixed vectors
    replace the learned affect embedding.
    """
    affect_ids = np.asarray(affect_ids)
    problem_ids = np.asarray(problem_ids)
    real = np.asarray(step_mask, dtype=bool)
    n_aff = aff_table.shape[0] if affect_rows is None else affect_rows.shape[0]
    a = np.where(real, affect_ids, 0)
    if real.any() and (a[real].min() < 0 or a[real].max() >= n_aff):
        raise ValueError("affect index out of range on a real timestep")
    if real.any() and (problem_ids[real].min() < 1 or problem_ids[real].max() >= p_table.shape[0]):
        raise ValueError("problem id out of range on a real timestep")
    if affect_rows is None:
        aff = ad.embedding(aff_table, a)
    else:
        aff = ad.as_tensor(np.asarray(affect_rows, dtype=p_table.dtype)[a])
    x = ad.concat([aff, ad.embedding(p_table, problem_ids)], axis=-1)
    return ad.affine(x, W1, b1)


def gat_layer(H: Tensor, nmask: np.ndarray, W: Tensor, a_src: Tensor, a_dst: Tensor,
              heads: int, offsets=BIDIRECTIONAL, merge: str = "mean", slope: float = 0.2):
    """Multi-head graph attention over the chain neighbourhoods, then ELU.

    ``W`` is (d_in, heads * d_out) with head ``k`` in columns ``k*d_out:(k+1)*d_out``;
    ``a_src``/``a_dst`` are (heads, d_out). Score for node ``n`` and neighbour
    ``j`` is ``LeakyReLU(a_dst . z_n + a_src . z_j)``. Heads are averaged
    (``merge="mean"``) or concatenated (``merge="concat"``).

    Returns ``(out, alpha)`` with ``alpha`` shaped (B, T, heads, len(offsets)).
    """
    B, T, _ = H.shape
    d_out = W.shape[1] // heads
    Z = ad.reshape(ad.matmul(H, W), (B, T, heads, d_out))
    s_dst = ad.sum_(ad.mul(Z, a_dst), axis=-1)
    s_src = ad.sum_(ad.mul(Z, a_src), axis=-1)
    scores = ad.stack(
        [ad.leaky_relu(ad.add(s_dst, ad.shift(s_src, o, axis=1)), slope) for o in offsets], axis=-1
    )
    bias = np.where(nmask, 0.0, _MASKED).astype(H.dtype)[:, :, None, :]
    alpha = ad.softmax(ad.add(scores, bias), axis=-1)
    agg = None
    for j, o in enumerate(offsets):
        term = ad.mul(alpha[..., j : j + 1], ad.shift(Z, o, axis=1))
        agg = term if agg is None else ad.add(agg, term)
    if merge == "mean":
        agg = ad.mean(agg, axis=2)
    elif merge == "concat":
        agg = ad.reshape(agg, (B, T, heads * d_out))
    else:
        raise ValueError(f"unknown head merge {merge!r}")
    return ad.elu(agg), alpha


def gat_layer1(H, nmask, params, prefix="gat1", heads=4, offsets=BIDIRECTIONAL, merge="mean"):
    return gat_layer(H, nmask, params[f"{prefix}.W"], params[f"{prefix}.a_src"],
                     params[f"{prefix}.a_dst"], heads, offsets, merge)


def gat_layer2(H, nmask, params, prefix="gat2", offsets=BIDIRECTIONAL):
    return gat_layer(H, nmask, params[f"{prefix}.W"], params[f"{prefix}.a_src"],
                     params[f"{prefix}.a_dst"], 1, offsets, "mean")


def dump_attention(alpha: np.ndarray, step_mask: np.ndarray, path, offsets=BIDIRECTIONAL,
                   keys=None) -> None:
    """Write per-node attention weights (real nodes only) as a tab-separated table."""
    alpha = np.asarray(alpha)
    with open(path, "w") as fh:
        fh.write("sequence\tnode\thead\t" + "\t".join(f"off{o:+d}" for o in offsets) + "\n")
        for b in range(alpha.shape[0]):
            key = keys[b] if keys is not None else b
            for t in np.flatnonzero(step_mask[b]):
                for h in range(alpha.shape[2]):
                    vals = "\t".join(f"{v:.6f}" for v in alpha[b, t, h])
                    fh.write(f"{key}\t{t}\t{h}\t{vals}\n")
