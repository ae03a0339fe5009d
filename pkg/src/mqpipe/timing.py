"""Duration and delay models shared by the simulator, trainer and CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DurationModel:
    """A nonnegative duration in milliseconds: fixed value or uniform range."""

    kind: str = "fixed"   # fixed | uniform | none
    a: float = 0.0
    b: float = 0.0

    @staticmethod
    def parse(spec: str) -> "DurationModel":
        """'none' | 'fixed:10' | 'uniform:2,5' | bare number."""
        spec = spec.strip().lower()
        if spec in ("none", ""):
            return DurationModel("none")
        if ":" not in spec:
            return DurationModel("fixed", float(spec))
        kind, _, args = spec.partition(":")
        if kind == "fixed":
            return DurationModel("fixed", float(args))
        if kind == "uniform":
            lo, hi = (float(x) for x in args.split(","))
            if hi < lo:
                raise ValueError(f"uniform range reversed in {spec!r}")
            return DurationModel("uniform", lo, hi)
        raise ValueError(f"unknown duration spec {spec!r}")

    def sample(self, rng) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "fixed":
            return self.a
        return float(rng.uniform(self.a, self.b))

    @property
    def max_value(self) -> float:
        return {"none": 0.0, "fixed": self.a, "uniform": self.b}[self.kind]

    @property
    def spec(self) -> str:
        """String form accepted by parse, for config echoes."""
        if self.kind == "none":
            return "none"
        if self.kind == "fixed":
            return f"fixed:{self.a:g}"
        return f"uniform:{self.a:g},{self.b:g}"


NO_DELAY = DurationModel("none")


def parse_stage_durations(spec: str) -> dict:
    """'sample=fixed:10,transfer=fixed:5,compute=fixed:15' -> stage dict.

    Commas inside uniform arguments belong to the preceding assignment, so
    splitting happens on commas only when the next chunk contains '='.
    """
    pieces = {}
    current_key = None
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" in chunk:
            key, _, val = chunk.partition("=")
            current_key = key.strip()
            pieces[current_key] = val.strip()
        elif current_key is not None:
            pieces[current_key] += "," + chunk
        else:
            raise ValueError(f"dangling duration fragment {chunk!r}")
    for k in pieces:
        if k not in ("sample", "transfer", "compute"):
            raise ValueError(f"unknown stage {k!r}")
    return {k: DurationModel.parse(v) for k, v in pieces.items()}


@dataclass(frozen=True)
class TransferModel:
    """Transfer delay: base duration plus a per-missing-feature-byte charge."""

    base: DurationModel = NO_DELAY
    per_byte_ms: float = 0.0

    def delay_ms(self, miss_bytes: int, rng) -> float:
        return self.base.sample(rng) + self.per_byte_ms * miss_bytes
