"""Attention tensors, content masks and their on-disk formats.

Tensors live on disk as NPY v1.0 files. The writer is hand-rolled so the
header bytes are fully deterministic; the reader accepts any little-endian
``<f4``/``<f8`` C-order array of rank 2 or 4.
"""

from __future__ import annotations

import ast
import enum
import json
import os
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64

# Stand-in for -inf on masked causal logits; keeps arithmetic NaN-free.
NEG_SENTINEL = float(np.finfo(np.float64).min)

PUNCT_CATEGORIES = frozenset({"Pc", "Pd", "Ps", "Pe", "Pi", "Pf", "Po", "Sm", "Sk"})
ROW_SUM_TOL = 1e-6


class TensorKind(str, enum.Enum):
    LOGITS = "logits"
    PROBABILITIES = "probabilities"


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Real tensor indexed ``[layer, head, query, key]``.

    ``data`` is stored as a read-only float64 array. Equality is bitwise.
    """

    data: np.ndarray
    kind: TensorKind = TensorKind.LOGITS
    causal: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[None, None]
        if arr.ndim != 4:
            raise ShapeError(f"attention tensor must have rank 2 or 4, got {arr.ndim}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "kind", TensorKind(self.kind))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_heads(self) -> int:
        return self.data.shape[1]

    @property
    def n_queries(self) -> int:
        return self.data.shape[2]

    @property
    def n_keys(self) -> int:
        return self.data.shape[3]

    def future_mask(self) -> np.ndarray:
        """Boolean ``[Q, K]`` array, True where key index exceeds query index."""
        q, k = self.data.shape[2:]
        return np.arange(k)[None, :] > np.arange(q)[:, None]

    def validate(self) -> None:
        """Raise ``ValueError`` if a kind-specific invariant is violated."""
        d = self.data
        if self.kind is TensorKind.PROBABILITIES:
            if not np.all(np.isfinite(d)):
                raise ValueError("probability tensor contains non-finite values")
            if d.size and (d.min() < 0.0 or d.max() > 1.0):
                raise ValueError("probability entries must lie in [0, 1]")
            sums = d.sum(axis=-1)
            if sums.size and np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
                worst = float(sums.flat[np.argmax(np.abs(sums - 1.0))])
                raise ValueError(f"probability rows must sum to 1, found {worst:.6g}")
            if self.causal and np.any(d[..., self.future_mask()] != 0.0):
                raise ValueError("causal probability tensor has mass on future keys")
        else:
            if np.any(np.isnan(d)):
                raise ValueError("logit tensor contains NaN")
            if self.causal and np.any(d[..., self.future_mask()] != NEG_SENTINEL):
                raise ValueError("causal logit tensor must hold the sentinel on future keys")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionTensor):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.causal == other.causal
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def apply_causal_sentinel(logits: np.ndarray) -> np.ndarray:
    """Return a copy of ``logits`` with future keys set to ``NEG_SENTINEL``."""
    out = np.array(logits, dtype=np.float64, copy=True)
    q, k = out.shape[-2:]
    out[..., np.arange(k)[None, :] > np.arange(q)[:, None]] = NEG_SENTINEL
    return out


# --------------------------------------------------------------------------
# NPY container


def _npy_header(shape: Sequence[int]) -> bytes:
    if len(shape) == 1:
        shape_repr = f"({shape[0]},)"
    else:
        shape_repr = "(" + ", ".join(str(int(s)) for s in shape) + ")"
    text = f"{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_repr}, }}"
    prefix = len(NPY_MAGIC) + 2 + 2
    pad = (-(prefix + len(text) + 1)) % NPY_ALIGN
    text = text + " " * pad + "\n"
    if len(text) > 0xFFFF:
        raise FormatError("header too long for NPY v1.0")
    return NPY_MAGIC + b"\x01\x00" + len(text).to_bytes(2, "little") + text.encode("latin1")


def write_npy(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    payload = _npy_header(arr.shape) + arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(payload)


def read_npy(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    if raw[6:8] != b"\x01\x00":
        raise FormatError(f"{path}: unsupported NPY version {raw[6]}.{raw[7]}")
    hlen = int.from_bytes(raw[8:10], "little")
    start = 10 + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10:start].decode("latin1"))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unparsable header") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: header must hold descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if descr not in ("<f4", "<f8"):
        raise FormatError(f"{path}: unsupported dtype {descr!r}")
    if fortran is not False:
        raise FormatError(f"{path}: fortran_order arrays are not supported")
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"{path}: malformed shape {shape!r}")
    count = int(np.prod(shape, dtype=np.int64))
    itemsize = np.dtype(descr).itemsize
    body = raw[start:]
    if len(body) != count * itemsize:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {count * itemsize}")
    return np.frombuffer(body, dtype=descr, count=count).reshape(shape).astype(np.float64)


def _meta_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".meta.json")


def save_tensor(tensor: AttentionTensor, path: str | os.PathLike) -> None:
    """Validate, then write the NPY payload and a ``.meta.json`` sidecar."""
    tensor.validate()
    meta = json.dumps({"causal": tensor.causal, "kind": tensor.kind.value}, sort_keys=True)
    try:
        write_npy(path, tensor.data)
        _meta_path(path).write_text(meta + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def load_tensor(
    path: str | os.PathLike,
    kind: TensorKind | str | None = None,
    causal: bool | None = None,
    validate: bool = True,
) -> AttentionTensor:
    """Read a tensor; explicit ``kind``/``causal`` win over the sidecar."""
    arr = read_npy(path)
    if arr.ndim not in (2, 4):
        raise ShapeError(f"{path}: rank {arr.ndim} tensor, expected 2 or 4")
    meta: dict = {}
    mp = _meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text(encoding="utf-8"))
    kind = TensorKind(kind if kind is not None else meta.get("kind", TensorKind.LOGITS))
    causal = bool(causal if causal is not None else meta.get("causal", False))
    if kind is TensorKind.PROBABILITIES and not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: probability tensor contains non-finite values")
    tensor = AttentionTensor(arr, kind=kind, causal=causal)
    if validate:
        tensor.validate()
    return tensor


# --------------------------------------------------------------------------
# Content mask


@dataclass(frozen=True, eq=False)
class ContentMask:
    mask: np.ndarray
    tokens: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        m = np.array(self.mask, dtype=bool, copy=True).reshape(-1)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        if self.tokens is not None:
            toks = tuple(self.tokens)
            if len(toks) != m.size:
                raise ShapeError("tokens and mask must have equal length")
            object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return int(self.mask.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ContentMask):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(self.mask, other.mask)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def all_content(cls, n: int) -> "ContentMask":
        return cls(np.ones(n, dtype=bool))

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": None if self.tokens is None else list(self.tokens), "mask": self.mask.tolist()},
            ensure_ascii=False,
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ContentMask":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(np.asarray(data["mask"], dtype=bool), data.get("tokens"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed mask file") from exc


def _is_punctuation_only(token: str) -> bool:
    return all(unicodedata.category(ch) in PUNCT_CATEGORIES for ch in token)


def is_content_token(token: str, special_markers: Iterable[str] = ()) -> bool:
    if token in set(special_markers):
        return False
    if not token or token.isspace():
        return False
    return not _is_punctuation_only(token)


def build_content_mask(tokens: Sequence[str], special_markers: Iterable[str] = ()) -> ContentMask:
    """Classify each token as content (True) or structural (False).

    Special markers, empty or whitespace-only strings and strings made only of
    punctuation/symbol characters are structural. Subword pieces such as
    ``"##ing"`` keep their letters and so stay content.
    """
    markers = frozenset(special_markers)
    flags = [is_content_token(t, markers) for t in tokens]
    return ContentMask(np.array(flags, dtype=bool), tuple(tokens))


def content_region(mask: ContentMask, row_index: int, causal: bool, exclude_self: bool = False) -> np.ndarray:
    """Ascending key indices in the content region of ``row_index``."""
    n = len(mask)
    if not 0 <= row_index < n:
        raise IndexError(f"row {row_index} out of range for mask of length {n}")
    keep = mask.mask.copy()
    if causal:
        keep[row_index + 1 :] = False
    if exclude_self:
        keep[row_index] = False
    return np.flatnonzero(keep)


def region_matrix(
    mask: ContentMask | np.ndarray,
    n_queries: int,
    causal: bool,
    exclude_self: bool = False,
) -> np.ndarray:
    """Boolean ``[Q, K]`` matrix whose row ``i`` marks the content region of row ``i``."""
    m = mask.mask if isinstance(mask, ContentMask) else np.asarray(mask, dtype=bool)
    k = m.size
    region = np.broadcast_to(m, (n_queries, k)).copy()
    if causal:
        region &= np.arange(k)[None, :] <= np.arange(n_queries)[:, None]
    if exclude_self:
        idx = np.arange(min(n_queries, k))
        region[idx, idx] = False
    return region
