"""Defense hyperparameters.

Defaults follow the published operating point (k=5, tau_h=tau_R=1.5,
tau_c=0.5, all slopes 6.0, beta=8.0). The shrinkage gains are not published
as numbers, only the ordering gamma_r > gamma_c; 1.0 / 4.0 is our choice.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping


class Phase(str, enum.Enum):
    PREFILL_ONLY = "prefill"
    DECODE_ONLY = "decode"
    FULL = "full"


@dataclass(frozen=True)
class TigsConfig:
    k: int = 5
    beta: float = 8.0
    tau_h: float = 1.5
    tau_R: float = 1.5
    tau_c: float = 0.5
    eta_h: float = 6.0
    eta_R: float = 6.0
    eta_c: float = 6.0
    gamma_c: float = 1.0
    gamma_r: float = 4.0
    epsilon: float = 1e-10
    # None means every layer of the tensor is defended.
    layers: frozenset[int] | None = None
    phase: Phase = Phase.PREFILL_ONLY
    # Rows [0, prefill_len) form the prompt; None means all rows are prompt rows.
    prefill_len: int | None = None
    lambda_act: float | None = None
    exclude_self: bool = False
    # Ablation switch: False screens the whole causal row instead of C_i.
    use_content_mask: bool = True

    def __post_init__(self) -> None:
        if self.layers is not None and not isinstance(self.layers, frozenset):
            object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        if not isinstance(self.phase, Phase):
            object.__setattr__(self, "phase", Phase(self.phase))
        self.validate()

    def validate(self) -> None:
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("eta_h", "eta_R", "eta_c", "gamma_c", "gamma_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.gamma_r > self.gamma_c:
            raise ValueError("row-dominant regime requires gamma_r > gamma_c")
        if self.lambda_act is not None and self.lambda_act <= 0:
            raise ValueError("lambda_act must be positive")
        if self.prefill_len is not None and self.prefill_len < 0:
            raise ValueError("prefill_len must be non-negative")

    @property
    def activation_threshold(self) -> float:
        """``lambda_act``, defaulting to 1% of ``beta``."""
        if self.lambda_act is not None:
            return self.lambda_act
        return 0.01 * self.beta

    def defends(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers

    def replace(self, **changes: Any) -> "TigsConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["layers"] = None if self.layers is None else sorted(self.layers)
        out["phase"] = self.phase.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TigsConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "TigsConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, pairs: Iterable[str]) -> "TigsConfig":
        """Apply ``key=value`` strings; values are parsed as JSON where possible."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        changes: dict[str, Any] = {}
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            key = key.strip()
            if not sep or key not in fields:
                raise ValueError(f"override must be key=value with a known key: {pair!r}")
            changes[key] = _parse_value(key, raw.strip())
        return self.replace(**changes)


def _parse_value(key: str, raw: str) -> Any:
    if key == "layers":
        if raw.lower() in ("", "none", "null", "all"):
            return None
        return frozenset(int(x) for x in raw.strip("[]").split(",") if x.strip())
    if key == "phase":
        return Phase(raw)
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


DEFAULT_CONFIG = TigsConfig()
