"""Positional-encoding schemes and the forward/backward-awareness checker.

A scheme maps a (position, session-length) pair to a d-vector.  The catalogue:

===========  =========================================================
kind         value at position ``pos`` in a session of length ``l``
===========  =========================================================
SPE          interleaved sin/cos of ``pos`` over d/2 frequencies
RSPE         SPE evaluated at the reverse index ``l - pos - 1``
DPE          d/2 of SPE(pos) concatenated with d/2 of SPE(reverse)
LPE          learned table row ``pos``
LDPE         learned forward row ``pos`` || learned backward row at reverse
LRPE         relative-only: scalar attention bias per offset (no vectors)
ASPE         SPE plus a sin/cos-swapped reverse sinusoid, added
ALPE         learned forward row plus learned backward row, added
2DSPE        sin/cos of ``pos`` on one half and of ``l`` on the other
2DLPE        learned position row || learned length row
NONE         zero vector
===========  =========================================================

Forward-awareness means items at the same position (counted from the start)
share an identifiable, position-distinguishing slice across sessions of any
length; backward-awareness is the mirror property counted from the end.
``check_awareness`` tests both empirically on a set of lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import Tensor

SPE = "SPE"
RSPE = "RSPE"
DPE = "DPE"
LPE = "LPE"
LDPE = "LDPE"
LRPE = "LRPE"
ASPE = "ASPE"
ALPE = "ALPE"
TWO_D_SPE = "2DSPE"
TWO_D_LPE = "2DLPE"
NONE = "NONE"

ALL_KINDS = (SPE, RSPE, DPE, LPE, LDPE, LRPE, ASPE, ALPE, TWO_D_SPE, TWO_D_LPE, NONE)
FIXED_KINDS = (SPE, RSPE, DPE, ASPE, TWO_D_SPE, NONE)
LEARNED_KINDS = (LPE, LDPE, LRPE, ALPE, TWO_D_LPE)
#: kinds whose first half is forward-indexed and second half backward-indexed
DUAL_KINDS = (DPE, LDPE)
#: kinds requiring d divisible by 4 (two interleaved sin/cos half-blocks)
QUARTER_KINDS = (DPE, LDPE, ALPE, TWO_D_SPE, TWO_D_LPE)

TABLE_INIT_LOW, TABLE_INIT_HIGH = -0.1, 0.1


class EncodingError(ValueError):
    """Invalid scheme construction or encode request."""


@dataclass
class EncodingScheme:
    """A named positional-encoding function plus any learned tables."""

    kind: str
    dim: int
    max_len: int
    tables: dict[str, Tensor] = field(default_factory=dict)

    @property
    def is_learned(self) -> bool:
        return self.kind in LEARNED_KINDS


def _table_shapes(kind: str, dim: int, max_len: int) -> dict[str, tuple[int, int]]:
    half = dim // 2
    if kind == LPE:
        return {"table": (max_len, dim)}
    if kind == LDPE:
        return {"forward": (max_len, half), "backward": (max_len, half)}
    if kind == ALPE:
        return {"forward": (max_len, dim), "backward": (max_len, dim)}
    if kind == TWO_D_LPE:
        # the length half is indexed by l itself, which ranges up to max_len
        return {"position": (max_len, half), "length": (max_len + 1, half)}
    if kind == LRPE:
        return {"bias": (2 * max_len - 1, 1)}
    return {}


def make_scheme(kind: str, dim: int, max_len: int, seed: int = 0) -> EncodingScheme:
    """Build a scheme; learned tables start uniform(-0.1, 0.1), LRPE bias at zero."""
    if kind not in ALL_KINDS:
        raise EncodingError(f"unknown encoding kind {kind!r}; known: {ALL_KINDS}")
    if dim <= 0 or dim % 2 != 0:
        raise EncodingError(f"dim must be a positive even integer, got {dim}")
    if kind in QUARTER_KINDS and dim % 4 != 0:
        raise EncodingError(f"{kind} requires dim divisible by 4, got {dim}")
    if max_len < 1:
        raise EncodingError(f"max_len must be >= 1, got {max_len}")
    rng = np.random.default_rng(seed)
    tables = {}
    for name, shape in _table_shapes(kind, dim, max_len).items():
        if kind == LRPE:
            tables[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            tables[name] = Tensor(rng.uniform(TABLE_INIT_LOW, TABLE_INIT_HIGH, shape), requires_grad=True)
    return EncodingScheme(kind=kind, dim=dim, max_len=max_len, tables=tables)


def _freqs(dim: int, count: int, scale: int) -> np.ndarray:
    """Wavelength divisors 10000^(scale*i/dim) for i in [0, count)."""
    i = np.arange(count, dtype=np.float64)
    return np.power(10000.0, scale * i / dim)


def _interleave(angles: np.ndarray) -> np.ndarray:
    """(..., k) angles -> (..., 2k) with sin on even and cos on odd dims."""
    out = np.empty(angles.shape[:-1] + (2 * angles.shape[-1],), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _check_pos(scheme: EncodingScheme, pos, l: int) -> None:
    pos = np.asarray(pos)
    if l < 1 or l > scheme.max_len:
        raise EncodingError(f"length {l} outside [1, {scheme.max_len}]")
    if np.any(pos < 0) or np.any(pos >= l):
        raise EncodingError(f"position {pos} outside [0, {l})")


def encode_matrix(scheme: EncodingScheme, l: int, positions=None) -> np.ndarray:
    """Rows of encodings for the given positions (default: all of 0..l-1)."""
    if scheme.kind == LRPE:
        raise EncodingError("LRPE is relative-only; use relative_bias for attention terms")
    if positions is None:
        positions = np.arange(l)
    positions = np.asarray(positions, dtype=np.int64)
    _check_pos(scheme, positions, l)
    d, kind = scheme.dim, scheme.kind
    pos = positions.astype(np.float64)[:, None]
    rev = float(l - 1) - pos

    if kind == NONE:
        return np.zeros((positions.size, d))
    if kind == SPE:
        return _interleave(pos / _freqs(d, d // 2, 2))
    if kind == RSPE:
        return _interleave(rev / _freqs(d, d // 2, 2))
    if kind == DPE:
        f = _freqs(d, d // 4, 2)
        return np.concatenate([_interleave(pos / f), _interleave(rev / f)], axis=-1)
    if kind == ASPE:
        f = _freqs(d, d // 2, 2)
        swapped = np.empty((positions.size, d))
        swapped[:, 0::2] = np.cos(rev / f)
        swapped[:, 1::2] = np.sin(rev / f)
        return _interleave(pos / f) + swapped
    if kind == TWO_D_SPE:
        f = _freqs(d, d // 4, 4)
        length_part = _interleave(np.full((positions.size, d // 4), float(l)) / f)
        return np.concatenate([_interleave(pos / f), length_part], axis=-1)
    if kind == LPE:
        return scheme.tables["table"].data[positions].copy()
    if kind == LDPE:
        fwd = scheme.tables["forward"].data[positions]
        bwd = scheme.tables["backward"].data[l - 1 - positions]
        return np.concatenate([fwd, bwd], axis=-1)
    if kind == ALPE:
        return scheme.tables["forward"].data[positions] + scheme.tables["backward"].data[l - 1 - positions]
    if kind == TWO_D_LPE:
        fwd = scheme.tables["position"].data[positions]
        lrow = np.repeat(scheme.tables["length"].data[l][None, :], positions.size, axis=0)
        return np.concatenate([fwd, lrow], axis=-1)
    raise EncodingError(f"unhandled kind {kind!r}")


def encode(scheme: EncodingScheme, pos: int, l: int) -> np.ndarray:
    """Encoding vector for one 0-based position in a length-l session."""
    return encode_matrix(scheme, l, positions=[pos])[0]


def relative_bias(scheme: EncodingScheme, i: int, j: int) -> float:
    """Learned attention-bias scalar for the (clamped) offset i - j."""
    if scheme.kind != LRPE:
        raise EncodingError(f"relative_bias needs an LRPE scheme, got {scheme.kind}")
    cap = scheme.max_len - 1
    offset = min(max(i - j, -cap), cap)
    return float(scheme.tables["bias"].data[offset + cap, 0])


@dataclass
class AwarenessReport:
    """Outcome of the empirical forward/backward-awareness check."""

    forward_aware: bool
    backward_aware: bool
    forward_dims: set[int]
    backward_dims: set[int]
    tested_lengths: list[int]
    epsilon: float
    delta: float


DEFAULT_LENGTHS = tuple(range(1, 13))
DEFAULT_EPSILON = 1e-9
DEFAULT_DELTA = 1e-6


def _consistent_dims(mats: dict[int, np.ndarray], lengths: list[int], eps: float) -> np.ndarray:
    """Boolean mask of dims equal (within eps) at shared row indices across all length pairs."""
    dim = mats[lengths[0]].shape[1]
    ok = np.ones(dim, dtype=bool)
    for a in range(len(lengths)):
        for b in range(a + 1, len(lengths)):
            p, q = lengths[a], lengths[b]
            n = min(p, q)
            gap = np.abs(mats[p][:n] - mats[q][:n]).max(axis=0)
            ok &= gap <= eps
    return ok


def _distinct_slices(mats: dict[int, np.ndarray], lengths: list[int], dims: np.ndarray, delta: float) -> bool:
    """True when slices at different row indices are pairwise separated by more than delta."""
    rows = [(idx, mats[l][idx, dims]) for l in lengths for idx in range(l)]
    for a in range(len(rows)):
        ia, va = rows[a]
        for b in range(a + 1, len(rows)):
            ib, vb = rows[b]
            if ia != ib and np.abs(va - vb).max() <= delta:
                return False
    return True


def check_awareness(
    scheme: EncodingScheme,
    lengths=DEFAULT_LENGTHS,
    epsilon: float = DEFAULT_EPSILON,
    delta: float = DEFAULT_DELTA,
) -> AwarenessReport:
    """Empirically test forward- and backward-awareness over a set of lengths.

    Forward side: a dimension qualifies when its value at every shared
    position agrees (within ``epsilon``) across all tested lengths; the
    scheme is forward-aware when the qualifying slice is nonempty and is
    injective over positions (pairwise L-inf separation above ``delta``).
    The backward side runs the identical test on reverse indices.

    Screening dimension-by-dimension is sound: any qualifying subset must
    satisfy the equality constraint per dimension, and taking the maximal
    consistent set maximizes the chance of distinguishing positions.
    """
    lengths = sorted(set(int(l) for l in lengths))
    if len(lengths) < 2:
        raise EncodingError("awareness is a cross-length property; need at least 2 lengths")
    if lengths[0] < 1 or lengths[-1] > scheme.max_len:
        raise EncodingError(f"lengths must lie in [1, {scheme.max_len}]")

    mats = {l: encode_matrix(scheme, l) for l in lengths}
    rev = {l: mats[l][::-1] for l in lengths}

    fwd_mask = _consistent_dims(mats, lengths, epsilon)
    bwd_mask = _consistent_dims(rev, lengths, epsilon)
    forward_ok = bool(fwd_mask.any()) and _distinct_slices(mats, lengths, fwd_mask, delta)
    backward_ok = bool(bwd_mask.any()) and _distinct_slices(rev, lengths, bwd_mask, delta)

    return AwarenessReport(
        forward_aware=forward_ok,
        backward_aware=backward_ok,
        forward_dims=set(np.flatnonzero(fwd_mask).tolist()),
        backward_dims=set(np.flatnonzero(bwd_mask).tolist()),
        tested_lengths=lengths,
        epsilon=epsilon,
        delta=delta,
    )


def linear_combination_residual(scheme: EncodingScheme, x: int, y: int, l: int) -> float:
    """How far a scheme is from composing positions by the sin/cos product rule.

    For sinusoids, the vector at position x+y is an exact bilinear
    combination of the vectors at x and y:

        v[x+y, 2i]   = v[x, 2i] * v[y, 2i+1] + v[x, 2i+1] * v[y, 2i]
        v[x+y, 2i+1] = v[x, 2i+1] * v[y, 2i+1] - v[x, 2i] * v[y, 2i]

    Returns the max absolute defect of both identities over all i.  Plain
    sinusoids satisfy them to rounding error; the additive scheme does not,
    because its combination coefficients depend on the session length.
    """
    if scheme.kind not in (SPE, ASPE):
        raise EncodingError(f"residual defined for SPE/ASPE only, got {scheme.kind}")
    if x < 0 or y < 0 or x >= l or y >= l or x + y >= l:
        raise EncodingError(f"need x, y, x+y inside [0, {l}), got x={x} y={y}")
    vx = encode(scheme, x, l)
    vy = encode(scheme, y, l)
    vxy = encode(scheme, x + y, l)
    sin_part = vxy[0::2] - (vx[0::2] * vy[1::2] + vx[1::2] * vy[0::2])
    cos_part = vxy[1::2] - (vx[1::2] * vy[1::2] - vx[0::2] * vy[0::2])
    return float(max(np.abs(sin_part).max(), np.abs(cos_part).max()))


def pairwise_heatmap(scheme: EncodingScheme, l1: int, l2: int, half: str = "full") -> np.ndarray:
    """l1 x l2 matrix of dot products between encodings of two session lengths.

    ``half`` may be "forward" or "backward" for dual kinds, restricting the
    dot product to the corresponding half of the dimensions.
    """
    a = encode_matrix(scheme, l1)
    b = encode_matrix(scheme, l2)
    if half != "full":
        if scheme.kind not in DUAL_KINDS:
            raise EncodingError(f"half={half!r} only applies to dual kinds {DUAL_KINDS}")
        h = scheme.dim // 2
        sl = slice(0, h) if half == "forward" else slice(h, scheme.dim)
        if half not in ("forward", "backward"):
            raise EncodingError(f"half must be full/forward/backward, got {half!r}")
        a, b = a[:, sl], b[:, sl]
    return a @ b.T


def heatmap_csv(matrix: np.ndarray) -> str:
    """Render a heatmap as CSV: header row 'l1\\l2', 6 decimal places, row-major."""
    lines = ["l1\\l2," + ",".join(str(j) for j in range(matrix.shape[1]))]
    for i, row in enumerate(matrix):
        lines.append(str(i) + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
