"""Command-line entry point: ``foresee {synth,train,sweep,eval,online}``.

Settings come from built-in defaults, then an optional ``--config`` key=value
file, then explicit flags (flags win). Every command writes
``run_manifest.json`` under ``--out`` before starting and finalizes it at the
end. Errors exit non-zero with a one-line JSON reason as the last stderr line.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import EncDecLSTM, lstm_config
from .checkpoint import content_hash, load_checkpoint, save_checkpoint
from .config import parse_bool, read_kv_file, typed_values, write_kv_file
from .data import (DATASET_INFO_NAME, DEFAULT_GAMMA, FRAME_SHAPE, load_dataset, save_frames,
                   split_dataset, window_count, write_manifest)
from .errors import ContractError, ForeseeError, ParseError, PathError
from .metrics import (COPY_LAST, evaluate, montage, report_from_rollouts, write_per_video_csv,
                      write_report_csv)
from .model import Arch, ForeseeModel, ModelConfig, rollout
from .synthetic import SyntheticSceneConfig, generate_synthetic_dataset
from .training import (TrainConfig, next_frame_mse, online_adapt_and_project, train,
                       validation_windows, write_history_csv)

log = logging.getLogger("foresee")

SWEEP_SHAPES = [(10, 512), (20, 512), (10, 1024), (20, 1024)]
SWEEP_PLACEMENTS = ["hidden", "output"]
SWEEP_STEPS = ["last", "all"]
REDUCED_SWEEP_STEPS = 150
REDUCED_SWEEP_VAL_WINDOWS = 40


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParseError(message)


# -- run manifest ----------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _jsonable(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "value") and not isinstance(v, (int, float, str, bool)):
        return v.value
    if isinstance(v, Path):
        return str(v)
    return v


class RunManifest:
    """``run_manifest.json``: command, resolved config, seed, checkpoint hashes, timestamps."""

    def __init__(self, out: Path, command: str, config: dict, seed: int):
        self.path = out / "run_manifest.json"
        self.data = {
            "command": command,
            "version": __version__,
            "config": _jsonable(config),
            "seed": seed,
            "checkpoints": {},
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.write()
        flat = {k: v for k, v in self.data["config"].items() if not isinstance(v, dict)}
        write_kv_file(out / "resolved.cfg", flat)

    def add_checkpoint(self, path) -> None:
        self.data["checkpoints"][str(Path(path).name)] = content_hash(path)

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok", **extra) -> None:
        self.data["finished"] = _now()
        self.data["status"] = status
        self.data.update(_jsonable(extra))
        self.write()


# -- shared helpers --------------------------------------------------------

def _prepare_out(path, force: bool = False, must_be_empty: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise PathError(f"--out {out} exists and is not a directory")
    if must_be_empty and out.is_dir() and any(out.iterdir()):
        if not force:
            raise ContractError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(cls, defaults: dict, args, flag_map: dict) -> object:
    """defaults <- config file <- explicit flags."""
    values = dict(defaults)
    if getattr(args, "config", None):
        entries = _config_entries(args, cls, ModelConfig)
        values.update(typed_values(cls, _known(cls, entries), str(args.config)))
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    try:
        return cls(**values)
    except TypeError as exc:
        raise ParseError(str(exc)) from None


def _known(cls, entries):
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in entries.items() if k in names}


def _dataset_info(dataset: Path) -> dict:
    info = dataset / DATASET_INFO_NAME
    return {k: v for k, (v, _) in read_kv_file(info).items()} if info.is_file() else {}


def _load_dataset(args):
    """Load ``--dataset``; gamma is skipped for data ``synth`` marked preprocessed."""
    dataset = Path(args.dataset)
    if not dataset.is_dir():
        raise PathError(f"dataset directory {dataset} does not exist")
    info = _dataset_info(dataset)
    flag = getattr(args, "gamma", None)
    if flag is not None:
        gamma = None if flag == 1.0 else flag
    elif parse_bool(info.get("preprocessed", "false")):
        gamma = None
    else:
        gamma = DEFAULT_GAMMA
    try:
        size = (int(info.get("height", FRAME_SHAPE[0])), int(info.get("width", FRAME_SHAPE[1])))
    except ValueError as exc:
        raise ParseError(f"{dataset / DATASET_INFO_NAME}: {exc}") from None
    return load_dataset(dataset, gamma=gamma, size=size), gamma


def _config_entries(args, *classes) -> dict:
    """Config-file entries, rejecting keys that none of ``classes`` accept."""
    if not getattr(args, "config", None):
        return {}
    entries = read_kv_file(args.config)
    names = {f.name for cls in classes for f in dataclasses.fields(cls)}
    for key, (_, lineno) in entries.items():
        if key not in names:
            raise ParseError(f"{args.config}: unknown key {key!r}", lineno)
    return entries


def _model_config(args, input_dim: int) -> ModelConfig:
    entries = _config_entries(args, ModelConfig, TrainConfig)
    values = typed_values(ModelConfig, _known(ModelConfig, entries), str(args.config))
    arch = (args.arch or values.get("arch", "foresee")).replace("-", "_")
    base = lstm_config(input_dim=input_dim) if arch == Arch.ENCDEC_LSTM.value else ModelConfig(input_dim=input_dim)
    values = {**{f.name: getattr(base, f.name) for f in dataclasses.fields(base)}, **values}
    for flag, key in (("hidden", "hidden_size"), ("seq_len", "seq_len"), ("layers", "num_layers"),
                      ("attn_placement", "attn_placement"), ("attn_steps", "attn_steps")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "literal_attn_exp", False):
        values["literal_attn_exp"] = True
    values["arch"] = arch
    values["input_dim"] = input_dim
    try:
        return ModelConfig(**values)
    except ForeseeError:
        raise
    except ValueError as exc:
        raise ParseError(f"invalid model setting: {exc}") from None


_TRAIN_FLAGS = {"lr": "learning_rate", "epochs": "epochs", "optimizer": "optimizer", "variant": "variant",
                "seed": "seed", "horizon": "mm1_horizon", "max_steps": "max_steps",
                "max_seconds": "max_seconds", "val_interval": "val_interval", "val_windows": "val_max_windows"}
_ONLINE_FLAGS = {"lr": "learning_rate", "seed": "seed", "online_epochs": "online_epochs",
                 "online_window": "online_window_frames", "input_averaging": "online_input_averaging",
                 "averaging_weight": "input_averaging_weight", "horizon": "rollout_horizon",
                 "online_lr": "online_learning_rate", "online_optimizer": "online_resume_optimizer"}


def _new_model(cfg: ModelConfig, seed: int):
    if cfg.arch is Arch.ENCDEC_LSTM:
        return EncDecLSTM.init(cfg, seed=seed)
    return ForeseeModel.init(cfg, seed=seed)


def _progress(row):
    if row.val_mse is not None:
        log.info("step %d epoch %d val_mse %.6g", row.step, row.epoch, row.val_mse)
    else:
        log.info("step %d epoch %d train_mse %.6g", row.step, row.epoch, row.train_mse)


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    entries = read_kv_file(args.config) if args.config else {}
    values = typed_values(SyntheticSceneConfig, entries, str(args.config or "config"))
    for flag, key in (("seed", "seed"), ("num_videos", "num_videos"), ("frames", "frames_per_video")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    if "split_ratios" in values:
        ratios = values["split_ratios"]
        if len(ratios) != 3 or not all(isinstance(r, float) and r >= 0 for r in ratios) or sum(ratios) <= 0:
            line = entries.get("split_ratios", ("", None))[1]
            raise ParseError(f"split_ratios must be three non-negative numbers, got {ratios}", line)
    scene = SyntheticSceneConfig(**values)
    out = _prepare_out(args.out, args.force, must_be_empty=True)
    manifest = RunManifest(out, "synth", dataclasses.asdict(scene), scene.seed)
    videos = generate_synthetic_dataset(scene)
    split = split_dataset(videos, scene.split_ratios, scene.seed)
    for v in videos:
        save_frames(v, out / v.source_id)
    write_manifest(out, split)
    write_kv_file(out / DATASET_INFO_NAME, {"preprocessed": True, "height": scene.height, "width": scene.width,
                                             "channels": scene.channels, "fps": scene.fps})
    write_kv_file(out / "scene.cfg", dataclasses.asdict(scene))
    manifest.finish(videos=len(videos), frames_per_video=scene.frames_per_video,
                    splits={k: len(getattr(split, k)) for k in ("train", "val", "test")})
    print(f"wrote {len(videos)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    split, gamma = _load_dataset(args)
    if not split.train:
        raise ContractError("dataset has no training videos")
    tcfg = _resolve(TrainConfig, {}, args, _TRAIN_FLAGS)
    mcfg = _model_config(args, split.train[0].input_dim)
    out = _prepare_out(args.out)
    manifest = RunManifest(out, "train", {**dataclasses.asdict(tcfg), "model": dataclasses.asdict(mcfg),
                                          "dataset": str(args.dataset), "gamma": gamma}, tcfg.seed)
    model = _new_model(mcfg, tcfg.seed)
    t0 = time.time()
    result = train(model, split.train, tcfg, split.val, progress=_progress)
    ckpt = save_checkpoint(result.model, out / "checkpoint.frse", result.optimizer_state)
    write_history_csv(result.history, out / "loss_history.csv")
    manifest.add_checkpoint(ckpt)
    vals = result.val_losses
    manifest.finish(steps=len(result.train_losses), seconds=round(time.time() - t0, 1),
                    val_mse_start=vals[0] if vals else None, val_mse_end=vals[-1] if vals else None)
    print(f"checkpoint {ckpt}")
    return 0


def _sweep_cell(job):
    idx, (seq, hid), placement, steps, split, base, tcfg, input_dim = job
    row = {"input_len": seq, "hidden": hid, "placement": placement, "attn_steps": steps}
    if not any(window_count(len(v), seq, 1) for v in split.train) or \
            not any(window_count(len(v), seq, 1) for v in split.val):
        return {**row, "val_mse": "", "train_steps": 0, "status": f"skipped: videos shorter than {seq + 1} frames"}
    seed = int(np.random.SeedSequence([base, idx]).generate_state(1)[0])
    mcfg = ModelConfig(input_dim=input_dim, hidden_size=hid, seq_len=seq, attn_placement=placement,
                       attn_steps=steps)
    model = ForeseeModel.init(mcfg, seed=seed)
    result = train(model, split.train, tcfg.replace(seed=seed), ())
    val = next_frame_mse(result.model, validation_windows(result.model, split.val, tcfg.val_max_windows))
    return {**row, "val_mse": repr(val), "train_steps": len(result.train_losses), "status": "ok"}


def cmd_sweep(args) -> int:
    split, gamma = _load_dataset(args)
    defaults = {} if args.full else {"max_steps": REDUCED_SWEEP_STEPS, "val_max_windows": REDUCED_SWEEP_VAL_WINDOWS}
    tcfg = _resolve(TrainConfig, defaults, args, _TRAIN_FLAGS)
    out = _prepare_out(args.out)
    manifest = RunManifest(out, "sweep", {**dataclasses.asdict(tcfg), "full": args.full,
                                          "dataset": str(args.dataset), "gamma": gamma}, tcfg.seed)
    input_dim = split.train[0].input_dim
    jobs = []
    for shape in SWEEP_SHAPES:
        for placement in SWEEP_PLACEMENTS:
            for steps in SWEEP_STEPS:
                jobs.append((len(jobs), shape, placement, steps, split, tcfg.seed, tcfg, input_dim))
    t0 = time.time()
    workers = max(1, args.workers or 1)
    if workers == 1:
        rows = []
        for job in jobs:
            rows.append(_sweep_cell(job))
            log.info("sweep cell %s", rows[-1])
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    cols = ["input_len", "hidden", "placement", "attn_steps", "val_mse", "train_steps", "status"]
    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    with open(out / "sweep_table.csv", "w") as fh:
        heads = [f"{p}_{s}" for p in SWEEP_PLACEMENTS for s in SWEEP_STEPS]
        fh.write("input_len,hidden," + ",".join(heads) + "\n")
        for seq, hid in SWEEP_SHAPES:
            cells = {f"{r['placement']}_{r['attn_steps']}": r["val_mse"] for r in rows
                     if (r["input_len"], r["hidden"]) == (seq, hid)}
            fh.write(f"{seq},{hid}," + ",".join(cells[h] for h in heads) + "\n")
    manifest.finish(cells=len(rows), seconds=round(time.time() - t0, 1))
    print(f"sweep written to {out / 'sweep.csv'}")
    return 0


def _checkpoint_label(model, path) -> str:
    return "foresee" if model.config.arch is Arch.FORESEE else "encdec_lstm"


def cmd_eval(args) -> int:
    split, gamma = _load_dataset(args)
    videos = getattr(split, args.split)
    if not videos:
        raise ContractError(f"dataset has no {args.split} videos")
    model = load_checkpoint(args.checkpoint)
    approaches = {_checkpoint_label(model, args.checkpoint): model}
    for path in args.baselines or []:
        m = load_checkpoint(path)
        name = _checkpoint_label(m, path)
        approaches[name if name not in approaches else Path(path).stem] = m
    seq_len = model.config.seq_len
    for m in approaches.values():
        if m.config.seq_len != seq_len:
            raise ContractError("all evaluated checkpoints must share seq_len")
    shortest = min(len(v) for v in videos)
    if args.horizon < 1 or shortest < seq_len + args.horizon:
        raise ContractError(f"horizon {args.horizon} needs videos of at least {seq_len + args.horizon} frames; "
                            f"shortest {args.split} video has {shortest}")
    out = _prepare_out(args.out)
    manifest = RunManifest(out, "eval", {"checkpoint": args.checkpoint, "baselines": args.baselines or [],
                                         "dataset": str(args.dataset), "horizon": args.horizon,
                                         "split": args.split, "stride": args.stride, "gamma": gamma}, 0)
    for m_path in [args.checkpoint, *(args.baselines or [])]:
        manifest.add_checkpoint(m_path)
    reports = evaluate(approaches, videos, seq_len, args.horizon, videos[0].image_shape, args.stride)
    write_report_csv(reports, out / "report.csv")
    write_per_video_csv(reports, out / "report_per_video.csv")
    _eval_montages(approaches, videos, seq_len, args.horizon, args.montage_columns, out)
    manifest.finish(rows=sum(r.horizon for r in reports.values()))
    for r in reports.values():
        print(f"{r.approach}: mse@1={r.mse[0]:.6g} ssim@1={r.ssim_x100[0]:.2f} windows={r.windows}")
    return 0


def _eval_montages(approaches, videos, seq_len, horizon, columns, out):
    v = videos[0]
    n = min(columns, window_count(len(v), seq_len, 1))
    for name, m in approaches.items():
        targets = [v.frames[i + seq_len] for i in range(n)]
        preds = [rollout(m, v.frames[i:i + seq_len], 1)[0].data for i in range(n)]
        montage(targets, preds, out / f"montage_{name}_next.png", v.image_shape)
        if horizon > 1:
            roll = rollout(m, v.frames[:seq_len], horizon)
            montage(v.frames[seq_len:seq_len + horizon], [f.data for f in roll],
                    out / f"montage_{name}_rollout.png", v.image_shape)


def cmd_online(args) -> int:
    split, gamma = _load_dataset(args)
    videos = getattr(split, args.split)
    if args.max_videos:
        videos = videos[: args.max_videos]
    if not videos:
        raise ContractError(f"dataset has no {args.split} videos")
    tcfg = _resolve(TrainConfig, {"online": True}, args, _ONLINE_FLAGS)
    base, base_state = load_checkpoint(args.checkpoint, with_optimizer=True)
    need = base.config.seq_len + tcfg.rollout_horizon
    short = [v.source_id for v in videos if len(v) < need]
    if short:
        raise ContractError(f"videos {short} are shorter than seq_len + horizon = {need} frames")
    out = _prepare_out(args.out)
    manifest = RunManifest(out, "online", {**dataclasses.asdict(tcfg), "checkpoint": args.checkpoint,
                                           "dataset": str(args.dataset), "split": args.split,
                                           "stride": args.stride, "gamma": gamma}, tcfg.seed)
    manifest.add_checkpoint(args.checkpoint)
    frozen_cfg = tcfg.replace(online_epochs=0)
    results = {"frozen": {}, "online": {}}
    for v in videos:
        for name, cfg in (("frozen", frozen_cfg), ("online", tcfg)):
            r = online_adapt_and_project(base, v, cfg, args.stride, base_state)
            results[name][v.source_id] = (r.rollouts, r.targets)
            log.info("%s %s: next-frame mse %.6g", name, v.source_id,
                     float(np.mean((r.rollouts[:, 0] - r.targets[:, 0]) ** 2)))
            if name == "online":
                montage(r.targets[0], r.rollouts[0], out / f"montage_online_{v.source_id}.png", v.image_shape)
    reports = {k: report_from_rollouts(k, per, videos[0].image_shape) for k, per in results.items()}
    write_report_csv(reports, out / "online_vs_frozen.csv")
    write_per_video_csv(reports, out / "online_per_video.csv")
    manifest.finish(frozen_mse_h1=reports["frozen"].mse[0], online_mse_h1=reports["online"].mse[0])
    for r in reports.values():
        print(f"{r.approach}: mse@1={r.mse[0]:.6g} mse@{r.horizon}={r.mse[-1]:.6g} windows={r.windows}")
    return 0


# -- argument parsing ------------------------------------------------------

def _on_off(raw: str) -> bool:
    try:
        return parse_bool(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected on/off, got {raw!r}") from None


def _resume_fresh(raw: str) -> bool:
    if raw not in ("resume", "fresh"):
        raise argparse.ArgumentTypeError(f"expected resume or fresh, got {raw!r}")
    return raw == "resume"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="foresee", description="Recurrent video prediction with attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="key=value config file; flags override it")
        sp.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset root with manifest.tsv")
            sp.add_argument("--gamma", type=float,
                            help=f"gamma for raw frames (default {DEFAULT_GAMMA}; skipped for preprocessed data)")

    s = sub.add_parser("synth", help="generate a synthetic chaotic-motion dataset")
    common(s, dataset=False)
    s.add_argument("--num-videos", type=int)
    s.add_argument("--frames", type=int, help="frames per video")
    s.add_argument("--force", action="store_true", help="replace a non-empty --out")
    s.set_defaults(func=cmd_synth)

    def model_flags(sp):
        sp.add_argument("--arch", choices=["foresee", "encdec-lstm"])
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--layers", type=int)
        sp.add_argument("--seq-len", type=int)
        sp.add_argument("--attn-placement", choices=["output", "hidden"])
        sp.add_argument("--attn-steps", choices=["last", "all"])
        sp.add_argument("--literal-attn-exp", action="store_true")

    def train_flags(sp):
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--optimizer", choices=["adam", "adagrad"])
        sp.add_argument("--variant", choices=["mm1", "mm2"])
        sp.add_argument("--horizon", type=int, help="decoded frames per window for mm1")
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--max-seconds", type=float, help="wall-clock training budget")
        sp.add_argument("--val-interval", type=int)
        sp.add_argument("--val-windows", type=int)

    t = sub.add_parser("train", help="train a model")
    common(t)
    model_flags(t)
    train_flags(t)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="hyper-parameter / attention-placement grid")
    common(w)
    train_flags(w)
    w.add_argument("--full", action="store_true", help="train every cell for the full epoch budget")
    w.add_argument("--workers", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate checkpoints against copy-last-frame")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--baselines", nargs="*", help="extra checkpoints, e.g. a trained encdec-lstm")
    e.add_argument("--horizon", type=int, default=1)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--stride", type=int, default=1, help="evaluate every n-th window")
    e.add_argument("--montage-columns", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("online", help="online adaptation vs frozen model")
    common(o)
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--lr", type=float)
    o.add_argument("--online-lr", type=float)
    o.add_argument("--online-epochs", type=int)
    o.add_argument("--online-optimizer", type=_resume_fresh, metavar="{resume,fresh}",
                   help="resume the checkpoint's Adam state or start from zero (default)")
    o.add_argument("--online-window", type=int)
    o.add_argument("--input-averaging", type=_on_off)
    o.add_argument("--averaging-weight", type=float)
    o.add_argument("--horizon", type=int, help="rollout horizon (default 5)")
    o.add_argument("--split", choices=["train", "val", "test"], default="test")
    o.add_argument("--stride", type=int, default=1)
    o.add_argument("--max-videos", type=int)
    o.set_defaults(func=cmd_online)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return args.func(args)
    except ForeseeError as exc:
        code = 2 if isinstance(exc, ParseError) else 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
