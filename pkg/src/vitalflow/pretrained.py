"""Location of the checkpoint shipped with the package."""

from __future__ import annotations

import os

CHECKPOINT_DIR = os.path.join(os.path.dirname(__file__), "checkpoints")


def default_checkpoint() -> str:
    """Path of the bundled default checkpoint (12 layers, trained with ``configs/default.toml``)."""
    path = os.environ.get("VITALFLOW_CHECKPOINT") or os.path.join(CHECKPOINT_DIR, "default.ckpt")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"default checkpoint {path} not found; train one with "
            "`vitalflow train --config configs/default.toml --out RUN` and set VITALFLOW_CHECKPOINT=RUN/final.ckpt"
        )
    return path


def default_vitality_report() -> str:
    """Vitality report computed for the bundled checkpoint (64 probes, T=50, guidance 3)."""
    path = os.environ.get("VITALFLOW_VITALITY_REPORT") or os.path.join(CHECKPOINT_DIR, "default.vitality.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"default vitality report {path} not found; run `vitalflow vitality --checkpoint default`")
    return path


def resolve(value, kind: str):
    """Map the literal ``"default"`` to the bundled file of ``kind`` ("checkpoint" or "vital_report")."""
    if value != "default":
        return value
    return default_checkpoint() if kind == "checkpoint" else default_vitality_report()
