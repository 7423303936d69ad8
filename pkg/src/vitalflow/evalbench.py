"""Edit-quality metrics in oracle-descriptor space plus masked pixel error.

Every image is parsed back to a scene and described by 28 attribute slots:
the background color and, for each of the 9 cells, the shape, color and
size of its object (``None`` when empty). A scene's *facts* are its
non-empty slots.

- ``img_sim``: share of the source's facts still present in the edit.
- ``txt_sim``: share of the target prompt's facts present in the edit.
- ``dir_sim``: 1 - Hamming(prompt delta, image delta) / 28.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import scenegen
from .editor import MODES, EditSession, run_modes
from .flow import FlowSchedule, GuidanceConfig, NudgeConfig

logger = logging.getLogger(__name__)

N_SLOTS = 1 + 3 * scenegen.GRID * scenegen.GRID
METRICS = ("img_sim", "txt_sim", "dir_sim", "masked_mse")


def slots(spec: scenegen.SceneSpec) -> tuple:
    out = [spec.background] + [None] * (N_SLOTS - 1)
    for o in spec.objects:
        base = 1 + 3 * o.cell
        out[base : base + 3] = [o.shape, o.color, o.size]
    return tuple(out)


def facts(spec: scenegen.SceneSpec) -> set:
    return {(i, v) for i, v in enumerate(slots(spec)) if v is not None}


def _spec(x) -> scenegen.SceneSpec:
    if isinstance(x, scenegen.SceneSpec):
        return x
    x = np.asarray(x)
    if x.ndim == 1:
        return scenegen.spec_of(x)
    return scenegen.parse(x)[0]


def _shared(ref: scenegen.SceneSpec, other: scenegen.SceneSpec) -> float:
    fr = facts(ref)
    return len(fr & facts(other)) / len(fr)


def img_sim(source_image, edited_image) -> float:
    """Fraction of the source scene's attributes kept in the edited image."""
    return _shared(_spec(source_image), _spec(edited_image))


def txt_sim(edited_image, target_prompt) -> float:
    """Fraction of the target prompt's attributes satisfied by the edited image."""
    return _shared(_spec(target_prompt), _spec(edited_image))


def dir_sim(source_image, edited_image, source_prompt, target_prompt) -> float:
    ps, pt = slots(_spec(source_prompt)), slots(_spec(target_prompt))
    is_, ie = slots(_spec(source_image)), slots(_spec(edited_image))
    keep = object()
    d_prompt = [b if a != b else keep for a, b in zip(ps, pt)]
    d_image = [b if a != b else keep for a, b in zip(is_, ie)]
    mismatches = sum(a is not b and a != b for a, b in zip(d_prompt, d_image))
    return 1.0 - mismatches / N_SLOTS


def masked_mse(edited: np.ndarray, reference: np.ndarray, edit_mask: np.ndarray) -> float:
    """Mean squared error over pixels outside ``edit_mask`` (0 when nothing is outside)."""
    keep = ~np.asarray(edit_mask, bool)
    if not keep.any():
        return 0.0
    diff = (np.asarray(edited, np.float64) - np.asarray(reference, np.float64))[keep]
    return float((diff**2).mean())


@dataclass
class EvalRecord:
    task: int
    kind: str
    mode: str
    img_sim: float
    txt_sim: float
    dir_sim: float
    masked_mse: float
    preserved_pixels: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    records: list
    modes: list
    settings: dict = field(default_factory=dict)

    def means(self) -> dict:
        out = {}
        for m in self.modes:
            rows = [r for r in self.records if r.mode == m]
            out[m] = {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRICS}
            out[m]["n"] = len(rows)
        return out

    def per_task(self, metric: str) -> dict:
        """mode -> array of ``metric`` ordered by task index."""
        out = {}
        for m in self.modes:
            rows = sorted((r for r in self.records if r.mode == m), key=lambda r: r.task)
            out[m] = np.array([getattr(r, metric) for r in rows])
        return out

    def to_dict(self) -> dict:
        return {"settings": self.settings, "means": self.means(), "records": [r.to_dict() for r in self.records]}

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", *METRICS, "n"])
            for m, row in self.means().items():
                w.writerow([m, *(repr(row[k]) for k in METRICS), row["n"]])


def score_outputs(task_index: int, task: scenegen.EditTask, mode: str, edited: np.ndarray, reference: np.ndarray) -> EvalRecord:
    src_tok = scenegen.prompt_of(task.source)
    tgt_tok = scenegen.prompt_of(task.target)
    src_spec = scenegen.parse(reference)[0]
    out_spec = scenegen.parse(edited)[0]
    return EvalRecord(
        task=task_index,
        kind=task.kind,
        mode=mode,
        img_sim=img_sim(src_spec, out_spec),
        txt_sim=txt_sim(out_spec, tgt_tok),
        dir_sim=dir_sim(src_spec, out_spec, src_tok, tgt_tok),
        masked_mse=masked_mse(edited, reference, task.edit_mask),
        preserved_pixels=int((~task.edit_mask).sum()),
    )


def evaluate_tasks(
    model,
    tasks: Sequence[scenegen.EditTask],
    vital: Sequence[int],
    modes: Sequence[str] = MODES,
    layer_scores: Sequence[float] | None = None,
    schedule: FlowSchedule | None = None,
    guidance: GuidanceConfig | None = None,
    nudge: NudgeConfig | None = None,
    source: str = "generated",
    seed: int = 0,
    batch: int = 16,
) -> EvalReport:
    """Edit every task under every mode and score the outputs.

    Generated sources use noise seed ``seed + task index``; real sources
    invert ``render(task.source)``.
    """
    from .editor import prepare

    schedule = schedule or FlowSchedule.make(50)
    nudge = nudge or NudgeConfig()
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    records = []
    for start in range(0, len(tasks), batch):
        chunk = tasks[start : start + batch]
        idx = list(range(start, start + len(chunk)))
        src = np.stack([scenegen.prompt_of(t.source) for t in chunk])
        tgt = np.stack([scenegen.prompt_of(t.target) for t in chunk])
        kw = dict(seeds=[seed + i for i in idx]) if source == "generated" else dict(images=np.stack([scenegen.render(t.source) for t in chunk]))
        session = EditSession(
            src, tgt, vital, source=source, mode=modes[0], layer_scores=layer_scores,
            schedule=schedule, guidance=guidance, nudge=nudge, **kw,
        )
        session = prepare(model, session)
        outs, ref = run_modes(model, session, modes)
        ref = ref.numpy()
        for m in modes:
            ed = outs[m].numpy()
            for j, (i, t) in enumerate(zip(idx, chunk)):
                records.append(score_outputs(i, t, m, ed[j], ref[j]))
        logger.info("evaluated tasks %d-%d", idx[0], idx[-1])
    settings = {
        "n_tasks": len(tasks), "vital": sorted(int(v) for v in vital), "steps": schedule.steps,
        "schedule": schedule.kind, "guidance": None if guidance is None else guidance.scale,
        "lambda": nudge.lam, "source": source, "seed": seed,
    }
    return EvalReport(records, list(modes), settings)


def run_eval(checkpoint, vital_report, tasks, modes=MODES, out_dir=None, **kwargs) -> EvalReport:
    """Load a checkpoint and vitality report, evaluate, and optionally write report files."""
    from .mmdit import MMDiT
    from .vitality import VitalityReport

    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint {checkpoint} not found")
    if not os.path.exists(vital_report):
        raise FileNotFoundError(f"vitality report {vital_report} not found")
    model = MMDiT.load(checkpoint)
    report = VitalityReport.load(vital_report)
    result = evaluate_tasks(model, tasks, report.vital, modes, layer_scores=report.scores, **kwargs)
    if out_dir is not None:
        result.write(out_dir)
    return result
