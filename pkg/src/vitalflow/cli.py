"""``vitalflow`` command line: data, training, sampling, inversion, layer scans, editing and evaluation.

Every command writes into its run directory (``--out``), guarded by a
lockfile, and leaves a ``config.resolved.toml`` snapshot of the merged
file/flag configuration next to its outputs. Failures print one JSON
object on stderr and exit with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import contextmanager

import numpy as np

EXIT_CODES = {
    "ok": 0,
    "error": 1,
    "usage": 2,
    "missing-input": 3,
    "bad-config": 4,
    "locked": 5,
    "diverged": 6,
}

log = logging.getLogger("vitalflow")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(EXIT_CODES["usage"])


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "exit_code": EXIT_CODES[kind], "message": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# config handling

DEFAULTS = {
    "seed": 0,
    "steps": 50,
    "schedule": "linear",
    "guidance": 3.0,
    "lam": 1.15,
    "n": 16384,
    "train_steps": 20000,
    "batch_size": 32,
    "lr": 3e-4,
    "lr_min": 3e-5,
    "warmup_steps": 200,
    "weight_decay": 0.01,
    "prompt_drop": 0.1,
    "checkpoint_every": 1000,
    "k": 64,
    "master_seed": 0,
    "metric": "pooled-feature-cosine",
    "rule": "top_k",
    "m": None,
    "tau": None,
    "mode": "inject_vital",
    "n_tasks": 64,
    "kinds": "recolor,add,remove,background,move,resize",
    "task_seed": 1234,
    "eval_source": "generated",
    "batch": 16,
    "d_model": 64,
    "heads": 4,
    "layers": 12,
}


def _read_toml(path):
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:
        import tomli as tomllib
    if not os.path.exists(path):
        raise CLIError("missing-input", f"config file {path} not found")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except Exception as exc:
        raise CLIError("bad-config", f"cannot parse config {path}: {exc}") from exc
    for k, v in data.items():
        if isinstance(v, dict):
            raise CLIError("bad-config", f"config must be flat key/value pairs; section [{k}] found")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def write_toml(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        for k in sorted(cfg):
            if cfg[k] is not None:
                fh.write(f"{k} = {_toml_value(cfg[k])}\n")


def resolve_config(args) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = _read_toml(args.config)
        unknown = set(file_cfg) - set(DEFAULTS) - set(vars(args))
        if unknown:
            raise CLIError("bad-config", f"unknown config key(s): {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config", "command"):
            cfg[k] = v
    for key, typ in (("steps", int), ("guidance", float), ("lam", float), ("k", int), ("n", int),
                     ("train_steps", int), ("batch_size", int), ("lr", float), ("seed", int)):
        try:
            cfg[key] = typ(cfg[key])
        except (TypeError, ValueError) as exc:
            raise CLIError("bad-config", f"{key} must be {typ.__name__}, got {cfg[key]!r}") from exc
    return cfg


@contextmanager
def run_dir(path):
    os.makedirs(path, exist_ok=True)
    lock = os.path.join(path, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CLIError("locked", f"run directory {path} is in use (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        os.remove(lock)


def _require(path, what):
    if not path or not os.path.exists(path):
        raise CLIError("missing-input", f"{what} {path!r} not found")
    return path


# ---------------------------------------------------------------------------
# helpers


def _guidance(cfg):
    from .flow import GuidanceConfig

    g = cfg["guidance"]
    return None if g is None or g < 0 else GuidanceConfig(float(g))


def _schedule(cfg):
    from .flow import FlowSchedule

    return FlowSchedule.make(cfg["steps"], cfg["schedule"])


def _prompt(text):
    from . import scenegen

    try:
        return scenegen.prompt_of(scenegen.scene_from_text(text))
    except ValueError as exc:
        raise CLIError("bad-config", f"bad prompt {text!r}: {exc}") from exc


def _load_model(cfg):
    from .mmdit import MMDiT

    from .pretrained import resolve

    return MMDiT.load(_require(resolve(cfg.get("checkpoint"), "checkpoint"), "checkpoint"))


def _load_report(cfg):
    from .vitality import VitalityReport

    from .pretrained import resolve

    return VitalityReport.load(_require(resolve(cfg.get("vital_report"), "vital_report"), "vitality report"))


def _tasks(cfg):
    from . import scenegen

    kinds = [k.strip() for k in str(cfg["kinds"]).split(",") if k.strip()]
    try:
        return scenegen.make_edit_tasks(int(cfg["task_seed"]), kinds, int(cfg["n_tasks"]))
    except ValueError as exc:
        raise CLIError("bad-config", str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg):
    from . import scenegen

    items = scenegen.make_dataset(cfg["n"], cfg["seed"])
    scenegen.save_dataset(items, os.path.join(cfg["out"], "data"))
    return {"items": len(items), "data": os.path.join(cfg["out"], "data")}


def cmd_train(cfg):
    from . import cfm, scenegen
    from .mmdit import ModelConfig

    if cfg.get("data"):
        data = scenegen.load_dataset(_require(cfg["data"], "dataset directory"))
    else:
        data = scenegen.make_dataset(cfg["n"], cfg["seed"])
    tcfg = cfm.TrainConfig(
        batch_size=cfg["batch_size"], steps=cfg["train_steps"], lr=cfg["lr"], lr_min=float(cfg["lr_min"]),
        warmup_steps=int(cfg["warmup_steps"]), weight_decay=float(cfg["weight_decay"]),
        prompt_drop=float(cfg["prompt_drop"]), seed=cfg["seed"], checkpoint_every=int(cfg["checkpoint_every"]),
        n_data=len(data),
    )
    mcfg = ModelConfig(d_model=int(cfg["d_model"]), heads=int(cfg["heads"]), layers=int(cfg["layers"]))
    resume = _require(cfg["resume"], "resume checkpoint") if cfg.get("resume") else None
    cfm.train(tcfg, data, cfg["out"], mcfg, resume=resume)
    curve = np.loadtxt(os.path.join(cfg["out"], "loss.csv"), delimiter=",", skiprows=1, ndmin=2)
    return {"checkpoint": os.path.join(cfg["out"], "final.ckpt"), "final_loss": float(curve[-50:, 1].mean())}


def cmd_sample(cfg):
    import torch

    from . import flow, scenegen

    model = _load_model(cfg)
    tok = _prompt(cfg["prompt"])
    img = flow.sample(model, flow.seed_latent([cfg["seed"]]), torch.from_numpy(tok[None]), _schedule(cfg), _guidance(cfg))
    path = os.path.join(cfg["out"], "sample.png")
    scenegen.save_png(path, img[0].numpy())
    spec, res = scenegen.parse(img[0].numpy())
    return {"image": path, "parsed": scenegen.scene_to_text(spec), "residual": res}


def _load_image(cfg):
    from . import scenegen
    from .validation import check_images

    return check_images(scenegen.load_png(_require(cfg.get("image"), "image")))


def cmd_invert(cfg):
    import torch

    from . import flow

    model = _load_model(cfg)
    x = _load_image(cfg)
    tok = _prompt(cfg["prompt"])
    z, cache = flow.invert(model, torch.from_numpy(x), torch.from_numpy(tok[None]), _schedule(cfg),
                           flow.NudgeConfig(cfg["lam"]), _guidance(cfg))
    path = os.path.join(cfg["out"], "cache.vflw")
    cache.save(path)
    return {"cache": path, "latent_std": float(z.values.std()), "provenance": z.provenance}


def cmd_reconstruct(cfg):
    import torch

    from . import flow, scenegen

    model = _load_model(cfg)
    sched = _schedule(cfg)
    x = _load_image(cfg)
    tok = torch.from_numpy(_prompt(cfg["prompt"])[None])
    if cfg.get("cache"):
        cache = flow.TrajectoryCache.load(_require(cfg["cache"], "cache"))
        rec = flow.reconstruct_with_cache(cache, sched)
        how = "cache"
    else:
        z, cache = flow.invert(model, torch.from_numpy(x), tok, sched, flow.NudgeConfig(cfg["lam"]), _guidance(cfg))
        rec = flow.sample(model, z, tok, sched, _guidance(cfg))
        how = "invert+sample"
    rec = rec.numpy()
    path = os.path.join(cfg["out"], "reconstruction.png")
    scenegen.save_png(path, rec[0])
    return {"image": path, "method": how, "mse": float(((rec - x) ** 2).mean()), "max_abs": float(np.abs(rec - x).max())}


def cmd_vitality(cfg):
    from .vitality import PerceptualMetric, gen_probe_set, vitality_scan

    model = _load_model(cfg)
    probe = gen_probe_set(int(cfg["master_seed"]), cfg["k"])
    try:
        metric = PerceptualMetric(cfg["metric"])
    except ValueError as exc:
        raise CLIError("bad-config", str(exc)) from exc
    m = None if cfg["m"] is None else int(cfg["m"])
    tau = None if cfg["tau"] is None else float(cfg["tau"])
    report = vitality_scan(model, probe, metric, _schedule(cfg), _guidance(cfg), cfg["rule"], tau, m,
                           gallery_dir=os.path.join(cfg["out"], "galleries"), batch=int(cfg["batch"]) * 4)
    report.galleries = {k: os.path.relpath(v, cfg["out"]) for k, v in report.galleries.items()}
    report.save(cfg["out"])
    return {"vital": report.vital, "scores": report.scores}


def _source(cfg):
    kind, value = cfg["source"]
    if kind == "seed":
        try:
            return {"source": "generated", "seeds": [int(value)]}
        except ValueError as exc:
            raise CLIError("bad-config", f"seed must be an integer, got {value!r}") from exc
    if kind == "image":
        from . import scenegen
        from .validation import check_images

        return {"source": "real", "images": check_images(scenegen.load_png(_require(value, "image")))}
    raise CLIError("usage", f"--source expects 'seed N' or 'image PATH', got {kind!r}")


def _session(cfg, model):
    from . import flow
    from .editor import EditSession

    report = _load_report(cfg)
    try:
        return EditSession(
            _prompt(cfg["prompt"])[None], _prompt(cfg["edit_prompt"])[None], report.vital, mode=cfg["mode"],
            layer_scores=report.scores, schedule=_schedule(cfg), nudge=flow.NudgeConfig(cfg["lam"]),
            guidance=_guidance(cfg), **_source(cfg),
        )
    except ValueError as exc:
        raise CLIError("bad-config", str(exc)) from exc


def cmd_edit(cfg):
    from . import scenegen
    from .editor import edit, prepare

    model = _load_model(cfg)
    session = prepare(model, _session(cfg, model))
    edited, ref = edit(model, session)
    out = cfg["out"]
    scenegen.save_png(os.path.join(out, "reference.png"), ref[0].numpy())
    scenegen.save_png(os.path.join(out, "edited.png"), edited[0].numpy())
    prov = {
        "checkpoint": cfg["checkpoint"], "vital_report": cfg["vital_report"], "vital": session.vital,
        "mode": session.mode, "source": list(cfg["source"]), "prompt": cfg["prompt"], "edit_prompt": cfg["edit_prompt"],
        "steps": session.schedule.steps, "schedule": session.schedule.kind, "lambda": session.nudge.lam,
        "guidance": None if session.guidance is None else session.guidance.scale,
        "parsed_reference": scenegen.scene_to_text(scenegen.parse(ref[0].numpy())[0]),
        "parsed_edited": scenegen.scene_to_text(scenegen.parse(edited[0].numpy())[0]),
        "max_abs_diff": float((edited - ref).abs().max()),
    }
    with open(os.path.join(out, "session.json"), "w") as fh:
        json.dump(prov, fh, indent=2, sort_keys=True)
    return prov


def _eval(cfg, modes):
    from . import flow
    from .evalbench import evaluate_tasks

    model = _load_model(cfg)
    report = _load_report(cfg)
    result = evaluate_tasks(
        model, _tasks(cfg), report.vital, modes, layer_scores=report.scores, schedule=_schedule(cfg),
        guidance=_guidance(cfg), nudge=flow.NudgeConfig(cfg["lam"]), source=cfg["eval_source"],
        seed=cfg["seed"], batch=int(cfg["batch"]),
    )
    result.write(cfg["out"])
    return result.means()


ABLATION_MODES = ("inject_vital", "inject_all", "inject_nonvital", "extend_all", "none")


def cmd_ablate(cfg):
    return _eval(cfg, ABLATION_MODES)


def cmd_eval(cfg):
    from .editor import MODES

    modes = [m.strip() for m in str(cfg.get("modes") or ",".join(MODES)).split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CLIError("bad-config", f"unknown mode(s) {bad}")
    return _eval(cfg, modes)


def cmd_attn_map(cfg):
    from . import attnviz
    from .editor import attn_profile, prepare

    model = _load_model(cfg)
    session = prepare(model, _session(cfg, model))
    try:
        points = [tuple(int(v) for v in p.split(",")) for p in str(cfg["points"]).split(";") if p.strip()]
    except ValueError as exc:
        raise CLIError("bad-config", f"points must look like 'r,c;r,c': {exc}") from exc
    try:
        prof = attn_profile(model, session, points)
    except IndexError as exc:
        raise CLIError("bad-config", str(exc)) from exc
    files = []
    for pt in prof.points:
        files.append(attnviz.render_overlay(prof.mean_maps, pt, cfg["out"], vital=prof.vital, config=model.config))
    out = {
        "vital": prof.vital,
        "points": {f"{p[0]},{p[1]}": {"layers": [list(r) for r in prof.table[p]], "summary": prof.summary[p]} for p in prof.points},
        "files": [list(f) for f in files],
    }
    with open(os.path.join(cfg["out"], "profile.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    return out


def cmd_pipeline(cfg):
    """gen-data -> train -> vitality -> edit -> eval, each stage in its own subdirectory."""
    root = cfg["out"]
    stages = {}
    sub = lambda name: {**cfg, "out": os.path.join(root, name)}
    for name in ("data", "train", "vitality", "edit", "eval"):
        os.makedirs(os.path.join(root, name), exist_ok=True)
    stages["gen-data"] = cmd_gen_data(sub("data"))
    train_cfg = sub("train")
    train_cfg["data"] = os.path.join(root, "data", "data")
    stages["train"] = cmd_train(train_cfg)
    ckpt = os.path.join(root, "train", "final.ckpt")
    stages["vitality"] = cmd_vitality({**sub("vitality"), "checkpoint": ckpt})
    report = os.path.join(root, "vitality", "report.json")
    edit_cfg = {**sub("edit"), "checkpoint": ckpt, "vital_report": report}
    edit_cfg.setdefault("source", ("seed", "0"))
    if not edit_cfg.get("prompt"):
        edit_cfg["prompt"] = "blue; large red circle@4"
    if not edit_cfg.get("edit_prompt"):
        edit_cfg["edit_prompt"] = "blue; large yellow circle@4"
    if edit_cfg.get("source") is None:
        edit_cfg["source"] = ("seed", "0")
    stages["edit"] = cmd_edit(edit_cfg)
    stages["eval"] = _eval({**sub("eval"), "checkpoint": ckpt, "vital_report": report}, ABLATION_MODES)
    return {"stages": list(stages)}


# ---------------------------------------------------------------------------
# parser


def _common(p, *, model=False, solver=False, edit=False, tasks=False):
    p.add_argument("--config", help="flat TOML file; flags override its values")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    if model:
        p.add_argument("--checkpoint", help="checkpoint path, or 'default' for the bundled one")
    if solver:
        p.add_argument("--steps", type=int, help="solver steps T (default 50)")
        p.add_argument("--schedule", choices=("linear", "cosine"))
        p.add_argument("--guidance", type=float, help="guidance scale; negative disables guidance")
        p.add_argument("--lambda", dest="lam", type=float, help="latent nudging factor (default 1.15)")
    if edit:
        p.add_argument("--source", nargs=2, metavar=("KIND", "VALUE"), help="'seed N' or 'image PATH'")
        p.add_argument("--prompt", help="source scene, e.g. 'blue; large red circle@4'")
        p.add_argument("--edit-prompt", dest="edit_prompt")
        p.add_argument("--vital-report", dest="vital_report", help="report.json path, or 'default' for the bundled one")
        p.add_argument("--mode", choices=("inject_vital", "inject_all", "inject_nonvital", "extend_all", "none"))
    if tasks:
        p.add_argument("--vital-report", dest="vital_report", help="report.json path, or 'default' for the bundled one")
        p.add_argument("--n-tasks", dest="n_tasks", type=int)
        p.add_argument("--kinds", help="comma-separated edit kinds")
        p.add_argument("--task-seed", dest="task_seed", type=int)
        p.add_argument("--eval-source", dest="eval_source", choices=("generated", "real"))
        p.add_argument("--batch", type=int)


def _train_flags(p):
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--n", type=int, help="dataset size when --data is not given")
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume")
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", type=int)


def _scan_flags(p):
    p.add_argument("--k", type=int, help="probe prompts (default 64)")
    p.add_argument("--master-seed", dest="master_seed", type=int)
    p.add_argument("--metric", choices=("pooled-feature-cosine", "pixel-cosine"))
    p.add_argument("--rule", choices=("top_k", "threshold"))
    p.add_argument("--m", type=int, help="top-k size (default ceil(L/4))")
    p.add_argument("--tau", type=float, help="vitality threshold for --rule threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitalflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a procedural dataset (PNG + index.json)")
    _common(p)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="flow-matching training")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image from a prompt")
    _common(p, model=True, solver=True)
    p.add_argument("--prompt")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert", help="inverse Euler with nudging; writes the trajectory cache")
    _common(p, model=True, solver=True)
    p.add_argument("--image")
    p.add_argument("--prompt")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("reconstruct", help="invert then sample, or replay a cache")
    _common(p, model=True, solver=True)
    p.add_argument("--image")
    p.add_argument("--prompt")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("vitality", help="per-layer bypass scan and vital-layer selection")
    _common(p, model=True, solver=True)
    _scan_flags(p)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_vitality)

    p = sub.add_parser("edit", help="edit a generated or real image")
    _common(p, model=True, solver=True, edit=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("attn-map", help="attention-distribution overlays for an edit")
    _common(p, model=True, solver=True, edit=True)
    p.add_argument("--points", help="pixel points 'r,c;r,c'")
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("ablate", help="evaluate every injection mode on an edit-task set")
    _common(p, model=True, solver=True, tasks=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate selected modes on an edit-task set")
    _common(p, model=True, solver=True, tasks=True)
    p.add_argument("--modes", help="comma-separated modes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="gen-data, train, vitality, edit and eval in one run")
    _common(p, solver=True)
    _train_flags(p)
    _scan_flags(p)
    p.add_argument("--n-tasks", dest="n_tasks", type=int)
    p.add_argument("--kinds")
    p.add_argument("--task-seed", dest="task_seed", type=int)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


REQUIRED = {
    "edit": ("checkpoint", "vital_report", "source", "prompt", "edit_prompt"),
    "attn-map": ("checkpoint", "vital_report", "source", "prompt", "edit_prompt", "points"),
    "ablate": ("checkpoint", "vital_report"),
    "eval": ("checkpoint", "vital_report"),
    "sample": ("checkpoint", "prompt"),
    "invert": ("checkpoint", "image", "prompt"),
    "reconstruct": ("checkpoint", "image", "prompt"),
    "vitality": ("checkpoint",),
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VITALFLOW_LOGLEVEL", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    threads = os.environ.get("VITALFLOW_THREADS")
    try:
        if threads:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        cfg = resolve_config(args)
        missing = [k for k in REQUIRED.get(args.command, ()) if cfg.get(k) is None]
        if missing:
            raise CLIError("usage", f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
        if "source" in cfg and cfg["source"] is not None:
            cfg["source"] = tuple(cfg["source"])
        with run_dir(cfg["out"]):
            write_toml(os.path.join(cfg["out"], "config.resolved.toml"), {k: v for k, v in cfg.items() if k != "out"})
            result = args.func(cfg)
        print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except CLIError as exc:
        _emit_error(exc.kind, str(exc))
        return EXIT_CODES[exc.kind]
    except FileNotFoundError as exc:
        _emit_error("missing-input", str(exc))
        return EXIT_CODES["missing-input"]
    except Exception as exc:
        from .cfm import TrainingDiverged

        kind = "diverged" if isinstance(exc, TrainingDiverged) else "error"
        log.debug("command failed", exc_info=True)
        _emit_error(kind, f"{type(exc).__name__}: {exc}")
        return EXIT_CODES[kind]


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
