"""Experiment harness: ``wpcl gen-data | detect | train | eval | ablate | report``.

Every subcommand reads one JSON config.  Unknown keys are rejected, and
``${NAME}`` is expanded from the environment inside the ``vlm`` section
only, so secrets stay out of config files.

Exit codes: 0 ok, 1 config error, 2 runtime failure, 3 partial ablation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import re
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .detector import DetectionError, DetectionReport, OracleConfig, detect_history
from .envsim import (
    DEFAULT_VOCAB,
    Episode,
    GridEnvironment,
    InstructionConfig,
    ObservationSpec,
    collect_history,
    dump_dataset,
    generate_environment,
    load_dataset,
    make_episode,
)
from .metrics import CSV_COLUMNS, per_episode_rows, summarize, summary_csv
from .nav import LOG_COLUMNS, PolicyParams, TrainConfig, evaluate, load_policy, save_policy, train
from .representation import BackboneConfig, ConfigError, HeadParams, Perception
from .vlmclient import EndpointConfig

log = logging.getLogger("wpcl")

SPLITS = ("train", "val_seen", "val_unseen")
ABLATION_AXES = {
    "alpha": ("train", "alpha"),
    "lambda": ("train", "lam"),
    "m": ("train", "m"),
    "tau": ("train", "tau"),
    "K": ("train", "K"),
    "noise": ("oracle", None),
}


class PartialFailure(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class EnvConfig:
    width: int = 8
    height: int = 8
    num_objects: int = 6
    wall_density: float = 0.1
    max_label_repeats: int = 1
    max_attempts: int = 20
    vocab: tuple[str, ...] = DEFAULT_VOCAB


@dataclass(frozen=True)
class SplitConfig:
    env_seed_start: int
    num_envs: int
    episodes_per_env: int
    episode_seed_offset: int = 0

    def env_seeds(self) -> range:
        return range(self.env_seed_start, self.env_seed_start + self.num_envs)

    def episode_seed(self, env_seed: int, k: int) -> int:
        return env_seed * 1000 + self.episode_seed_offset + k


@dataclass(frozen=True)
class SplitsConfig:
    train: SplitConfig = SplitConfig(0, 20, 10)
    val_seen: SplitConfig = SplitConfig(0, 20, 2, episode_seed_offset=500)
    val_unseen: SplitConfig = SplitConfig(100, 10, 10)


@dataclass(frozen=True)
class MetricsConfig:
    success_threshold: int = 1
    step_cap: int | None = None
    per_episode: bool = False


@dataclass(frozen=True)
class DetectorConfig:
    backend: str = "oracle"
    max_workers: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = EnvConfig()
    spec: ObservationSpec = ObservationSpec(fov_degrees=180.0, range=6)
    instruction: InstructionConfig = InstructionConfig()
    detector: DetectorConfig = DetectorConfig()
    oracle: OracleConfig = OracleConfig()
    vlm: EndpointConfig | None = None
    backbone: BackboneConfig = BackboneConfig(distance_decay=0.8)
    train: TrainConfig = TrainConfig()
    metrics: MetricsConfig = MetricsConfig()
    splits: SplitsConfig = SplitsConfig()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def perception(self) -> Perception:
        return Perception(self.spec, self.backbone, self.env.vocab)


_SECTIONS = {
    "env": EnvConfig,
    "spec": ObservationSpec,
    "instruction": InstructionConfig,
    "detector": DetectorConfig,
    "oracle": OracleConfig,
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
}

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value, where: str):
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"{where}: environment variable {name} is not set")
            return os.environ[name]
        return _ENV_REF.sub(sub, value)
    return value


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = {f.name: f.default for f in fields(cls)}
    kwargs = {k: tuple(v) if isinstance(defaults[k], tuple) and isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kw[name] = _build(cls, doc[name], name)
    if doc.get("vlm") is not None:
        vlm = {k: _interpolate(v, f"vlm.{k}") for k, v in _require_obj(doc["vlm"], "vlm").items()}
        kw["vlm"] = _build(EndpointConfig, vlm, "vlm")
    if "splits" in doc:
        sp = _require_obj(doc["splits"], "splits")
        bad = sorted(set(sp) - set(SPLITS))
        if bad:
            raise ConfigError(f"splits: unknown key(s) {', '.join(bad)}")
        base = SplitsConfig()
        kw["splits"] = SplitsConfig(**{
            s: _build(SplitConfig, {**asdict(getattr(base, s)), **_require_obj(sp[s], f"splits.{s}")}, f"splits.{s}")
            if s in sp else getattr(base, s)
            for s in SPLITS
        })
    if "seeds" in doc:
        seeds = doc["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        kw["seeds"] = tuple(seeds)
    cfg = ExperimentConfig(**kw)
    validate(cfg)
    return cfg


def _require_obj(v, where):
    if not isinstance(v, dict):
        raise ConfigError(f"{where}: expected an object")
    return v


def validate(cfg: ExperimentConfig) -> None:
    sp = cfg.splits
    for name in SPLITS:
        s = getattr(sp, name)
        if s.num_envs < 1 or s.episodes_per_env < 1:
            raise ConfigError(f"splits.{name}: num_envs and episodes_per_env must be >= 1")
        if not 0 <= s.episode_seed_offset or s.episode_seed_offset + s.episodes_per_env > 1000:
            raise ConfigError(f"splits.{name}: episode seeds must stay within 0..999 per environment")
    train_envs, seen_envs, unseen_envs = (set(getattr(sp, s).env_seeds()) for s in SPLITS)
    if train_envs & unseen_envs:
        raise ConfigError("splits: val_unseen environment seeds overlap the training seeds")
    if not seen_envs <= train_envs:
        raise ConfigError("splits: val_seen environment seeds must be a subset of the training seeds")
    tr, vs = sp.train, sp.val_seen
    if set(range(tr.episode_seed_offset, tr.episode_seed_offset + tr.episodes_per_env)) & set(
        range(vs.episode_seed_offset, vs.episode_seed_offset + vs.episodes_per_env)
    ):
        raise ConfigError("splits: val_seen episode seeds overlap the training episodes")
    if cfg.detector.backend not in ("oracle", "vlm"):
        raise ConfigError(f"detector.backend must be 'oracle' or 'vlm', got {cfg.detector.backend!r}")
    if cfg.env.num_objects > len(cfg.env.vocab) * cfg.env.max_label_repeats:
        raise ConfigError("env: num_objects exceeds vocabulary size times max_label_repeats")
    if cfg.train.d < 1 or cfg.train.d_text < 1:
        raise ConfigError("train: d and d_text must be >= 1")
    try:
        HeadParams.init(cfg.backbone.d0, cfg.train.d, cfg.train.lam, cfg.train.head_hidden)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- io helpers


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


class RunLock:
    """Exclusive ownership of a run directory for one process."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory {self.path.parent} is locked ({self.path} exists)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "wpcl": __version__}


# --------------------------------------------------------------------------- data


def build_split(cfg: ExperimentConfig, split: str) -> tuple[list[GridEnvironment], list[Episode]]:
    s = getattr(cfg.splits, split)
    e = cfg.env
    envs, episodes = [], []
    for env_seed in s.env_seeds():
        env = generate_environment(env_seed, e.width, e.height, e.num_objects, e.vocab,
                                   e.wall_density, e.max_label_repeats, e.max_attempts)
        envs.append(env)
        episodes.extend(make_episode(s.episode_seed(env_seed, k), env, cfg.spec, cfg.instruction)
                        for k in range(s.episodes_per_env))
    return envs, episodes


def build_dataset(cfg: ExperimentConfig) -> dict[str, list[Episode]]:
    return {split: build_split(cfg, split)[1] for split in SPLITS}


def gen_data(cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create {out}: {exc}") from exc
    paths = {}
    for split in SPLITS:
        envs, eps = build_split(cfg, split)
        p = out / f"{split}.json"
        try:
            atomic_write(p, dump_dataset(envs, eps))
        except OSError as exc:
            raise RuntimeError(f"cannot write {p}: {exc}") from exc
        paths[split] = p
    return paths


def load_split(data_dir, split: str) -> list[Episode]:
    p = Path(data_dir) / f"{split}.json"
    try:
        return load_dataset(p.read_text())[1]
    except OSError as exc:
        raise RuntimeError(f"cannot read dataset {p}: {exc}") from exc


# --------------------------------------------------------------------------- detection


def _read_detections(path: Path, episodes: Sequence[Episode]) -> dict[int, list[DetectionReport]]:
    """Complete per-episode report lists; truncated or partial episodes are dropped."""
    by_ep: dict[int, dict[int, DetectionReport]] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            try:
                d = json.loads(line)
                by_ep.setdefault(int(d["episode"]), {})[int(d["index"])] = DetectionReport(d["index"], frozenset(d["labels"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                log.warning("ignoring malformed detection line in %s", path)
    out = {}
    for e, reps in by_ep.items():
        if e < len(episodes) and sorted(reps) == list(range(len(episodes[e].expert_poses()))):
            out[e] = [reps[i] for i in sorted(reps)]
    return out


def _detection_lines(e: int, reports: Sequence[DetectionReport]) -> str:
    return "".join(r.to_json(episode=e) + "\n" for r in reports)


def detect(cfg: ExperimentConfig, data_dir, backend: str | None = None, splits: Sequence[str] = ("train",),
           out_dir=None, transport=None) -> dict:
    """Write ``<out>/<split>.jsonl`` with one report per expert-history observation.

    Resumes from existing files; per-episode failures are counted and the
    partial output is kept.
    """
    backend = backend or cfg.detector.backend
    out = Path(out_dir) if out_dir is not None else Path(data_dir) / "detections"
    out.mkdir(parents=True, exist_ok=True)
    vlm = client = None
    if backend == "vlm":
        from .vlmclient import ResponseCache, VlmClient, VlmDetector

        if cfg.vlm is None:
            raise ConfigError("the vlm backend needs a 'vlm' config section")
        client = VlmClient(cfg.vlm, transport=transport)
        vlm = VlmDetector(client, ResponseCache(out / "vlm_cache.jsonl"))
    elif backend != "oracle":
        raise ConfigError(f"unknown detector backend {backend!r}")
    stats = {"failures": 0, "written": 0, "resumed": 0, "network_calls": 0}
    try:
        for split in splits:
            episodes = load_split(data_dir, split)
            path = out / f"{split}.jsonl"
            done = _read_detections(path, episodes)
            stats["resumed"] += len(done)
            # drop partial episodes so appends never follow a torn line
            atomic_write(path, "".join(_detection_lines(e, done[e]) for e in sorted(done)))
            with open(path, "a") as fh:
                for e, ep in enumerate(episodes):
                    if e in done:
                        continue
                    hist = collect_history(ep.env, ep.expert_poses(), cfg.spec)
                    try:
                        reports = detect_history(hist, ep.env, backend, cfg.oracle, vlm, stream=ep.seed,
                                                 max_workers=cfg.detector.max_workers)
                    except DetectionError as exc:
                        stats["failures"] += 1
                        log.error("%s episode %d: %s", split, e, exc)
                        continue
                    fh.write(_detection_lines(e, reports))
                    fh.flush()
                    stats["written"] += 1
    finally:
        if client is not None:
            stats["network_calls"] = client.network_calls
            client.close()
    if stats["failures"]:
        raise RuntimeError(f"detection failed for {stats['failures']} episode(s); partial results kept in {out}")
    return stats


def load_detections(path, episodes: Sequence[Episode]) -> dict[int, list[DetectionReport]]:
    path = Path(path)
    if not path.exists():
        raise RuntimeError(f"detection cache {path} not found; run the detect subcommand first")
    det = _read_detections(path, episodes)
    missing = [e for e in range(len(episodes)) if e not in det]
    if missing:
        raise RuntimeError(f"detection cache {path} is missing {len(missing)} episode(s), first {missing[0]}")
    return det


# --------------------------------------------------------------------------- train / eval


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def write_train_log(path, rows: Sequence[dict]) -> None:
    _write_csv(path, LOG_COLUMNS, [[r["iter"], r["stage"], *(repr(float(r[k])) for k in LOG_COLUMNS[2:])] for r in rows])


def train_one(cfg: ExperimentConfig, seed: int, data: dict[str, list[Episode]], perception: Perception,
              detections=None, seed_dir: Path | None = None):
    tcfg = replace(cfg.train, seed=seed)
    ckpt_dir = seed_dir / "checkpoints" if seed_dir is not None else None

    def save_checkpoint(it, policy, head, rec):
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_policy(policy, head, ckpt_dir / f"iter_{it:06d}.json", iter=it, seed=seed, val=rec)

    return train(tcfg, data["train"], perception, data["val_seen"], detections, cfg.oracle,
                 on_eval=save_checkpoint if ckpt_dir is not None else None, success_threshold=cfg.metrics.success_threshold, step_cap=cfg.metrics.step_cap)


def run_train(cfg: ExperimentConfig, data_dir, run_dir, detections_path=None, seeds: Sequence[int] | None = None) -> dict:
    run = Path(run_dir)
    seeds = tuple(seeds) if seeds else cfg.seeds
    with RunLock(run):
        t0 = time.perf_counter()
        manifest = {
            "status": "failed",
            "config_hash": config_hash(cfg),
            "versions": versions(),
            "seeds": list(seeds),
            "artifacts": {},
            "stage_durations": {},
        }
        atomic_write(run / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        try:
            data = {s: load_split(data_dir, s) for s in ("train", "val_seen")}
            det_path = Path(detections_path) if detections_path else Path(data_dir) / "detections" / "train.jsonl"
            detections = load_detections(det_path, data["train"])
            perception = cfg.perception()
            for seed in seeds:
                sd = run / f"seed_{seed}"
                res = train_one(cfg, seed, data, perception, detections, sd)
                save_policy(res.policy, res.head, sd / "policy.json", iter=res.best_iter, seed=seed, val_spl=res.best_spl)
                write_train_log(sd / "train_log.csv", res.log)
                _write_csv(sd / "val_curve.csv", ("iter", *CSV_COLUMNS[2:]),
                           [[r["iter"], *(f"{r[k]:.6f}" for k in CSV_COLUMNS[2:])] for r in res.evals])
                manifest["artifacts"][str(seed)] = {
                    "policy": str(sd / "policy.json"),
                    "train_log": str(sd / "train_log.csv"),
                    "val_curve": str(sd / "val_curve.csv"),
                    "checkpoints": str(sd / "checkpoints"),
                    "best_iter": res.best_iter,
                }
                manifest["stage_durations"][str(seed)] = res.durations
            manifest["status"] = "ok"
        except BaseException as exc:
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            manifest["wall_clock"] = time.perf_counter() - t0
            atomic_write(run / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def check_compatible(policy: PolicyParams, head: HeadParams, cfg: ExperimentConfig, path) -> None:
    problems = []
    if head.d0 != cfg.backbone.d0:
        problems.append(f"head input dimension {head.d0} != backbone d0 {cfg.backbone.d0}")
    if policy.d != head.d:
        problems.append(f"policy feature dimension {policy.d} != head output dimension {head.d}")
    if len(policy.E) != len(cfg.env.vocab):
        problems.append(f"embedding rows {len(policy.E)} != vocabulary size {len(cfg.env.vocab)}")
    if problems:
        raise CheckpointError(f"incompatible checkpoint {path}: " + "; ".join(problems))


def eval_rows(cfg: ExperimentConfig, episodes, split, seed, policy, head, perception, per_episode=False):
    results = evaluate(policy, head, episodes, perception, cfg.metrics.step_cap, cfg.metrics.success_threshold, seed=seed)
    row = summarize(results).row(split, seed)
    return row, (per_episode_rows(results) if per_episode else None)


def run_eval(cfg: ExperimentConfig, data_dir, split: str, out, run_dir=None, checkpoint=None,
             policy_kind: str = "learned", per_episode_out=None) -> str:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    episodes = load_split(data_dir, split)
    perception = cfg.perception()
    targets = []
    if policy_kind == "learned":
        if checkpoint is not None:
            paths = [Path(checkpoint)]
        elif run_dir is not None:
            paths = [Path(run_dir) / f"seed_{s}" / "policy.json" for s in cfg.seeds]
        else:
            raise ConfigError("eval of a learned policy needs --run or --checkpoint")
        for p in paths:
            try:
                policy, head, meta = load_policy(p)
            except (OSError, KeyError, ValueError) as exc:
                raise CheckpointError(f"cannot load checkpoint {p}: {exc}") from exc
            check_compatible(policy, head, cfg, p)
            targets.append((meta.get("seed", 0), policy, head))
    else:
        targets = [(s, policy_kind, None) for s in cfg.seeds]
    rows, per_ep = [], []
    for seed, policy, head in targets:
        row, eps = eval_rows(cfg, episodes, split, seed, policy, head, perception, per_episode_out is not None)
        rows.append(row)
        if eps:
            per_ep.extend({"split": split, "seed": seed, **r} for r in eps)
    text = summary_csv(rows)
    if out is not None:
        atomic_write(out, text)
    if per_episode_out is not None:
        cols = ("split", "seed", "episode", "TL", "NE", "success", "SPL", "oracle_success")
        _write_csv(per_episode_out, cols, [[r[c] for c in cols] for r in per_ep])
    return text


# --------------------------------------------------------------------------- ablation


def with_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    section, key = ABLATION_AXES[axis]
    if axis == "noise":
        return replace(cfg, oracle=replace(cfg.oracle, miss_rate=value, spurious_rate=value))
    if key in ("m", "K"):
        if value != int(value):
            raise ConfigError(f"{axis} must be an integer, got {value}")
        value = int(value)
    try:
        new = replace(cfg, train=replace(cfg.train, **{key: value}))
        validate(new)
    except ValueError as exc:
        raise ConfigError(f"{axis}={value}: {exc}") from exc
    return new


ABLATION_COLUMNS = ("axis", "value", "split", "seed", "TL", "NE", "SR", "SPL", "OSR", "status")


def run_ablation(cfg: ExperimentConfig, axis: str, values: Sequence[float], out_dir, data_dir=None,
                 split: str = "val_unseen", seeds: Sequence[int] | None = None) -> list[list]:
    """Train and evaluate every (value, seed); failures become ``status=failed`` rows."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    seeds = tuple(seeds) if seeds else cfg.seeds
    variants = [(v, with_axis(cfg, axis, v)) for v in values]
    if data_dir is not None:
        data = {s: load_split(data_dir, s) for s in SPLITS}
    else:
        data = build_dataset(cfg)
    perception = cfg.perception()
    rows, failed = [], 0
    for v, vcfg in variants:
        for seed in seeds:
            try:
                res = train_one(vcfg, seed, data, perception)
                row, _ = eval_rows(vcfg, data[split], split, seed, res.policy, res.head, perception)
                rows.append([axis, v, *row, "ok"])
            except Exception as exc:  # recorded, sweep continues
                log.error("ablation %s=%s seed %d failed: %s", axis, v, seed, exc)
                rows.append([axis, v, split, seed, "", "", "", "", "", "failed"])
                failed += 1
    out = Path(out_dir)
    text_rows = [[r[0], repr(float(r[1])), r[2], r[3], *(f"{x:.6f}" if x != "" else "" for x in r[4:9]), r[9]] for r in rows]
    _write_csv(out / f"ablation_{axis}.csv", ABLATION_COLUMNS, text_rows)
    atomic_write(out / f"ablation_{axis}.svg", line_plot_svg(axis, rows))
    if failed:
        raise PartialFailure(f"{failed} of {len(rows)} ablation runs failed")
    return rows


def _means(rows, col):
    i = ABLATION_COLUMNS.index(col)
    by: dict[float, list[float]] = {}
    for r in rows:
        if r[-1] == "ok":
            by.setdefault(float(r[1]), []).append(float(r[i]))
    return sorted((v, float(np.mean(xs))) for v, xs in by.items())


def line_plot_svg(axis: str, rows, width: int = 480, height: int = 300) -> str:
    """Mean SR and SPL per value, one polyline each, values evenly spaced."""
    series = {"SR": ("#1f77b4", _means(rows, "SR")), "SPL": ("#d62728", _means(rows, "SPL"))}
    values = sorted({float(r[1]) for r in rows})
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    xs = {v: left + (pw * i / (len(values) - 1) if len(values) > 1 else pw / 2) for i, v in enumerate(values)}

    def y(val):
        return top + ph * (1 - val)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{left - 8}" y="{y(t) + 4:.1f}" font-size="10" text-anchor="end">{t:.2f}</text>')
    for v, x in xs.items():
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 15}" font-size="10" text-anchor="middle">{v:g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" font-size="12" text-anchor="middle">{axis}</text>')
    for k, (name, (color, pts)) in enumerate(series.items()):
        if pts:
            coords = " ".join(f"{xs[v]:.1f},{y(m):.1f}" for v, m in pts)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
            parts.extend(f'<circle cx="{xs[v]:.1f}" cy="{y(m):.1f}" r="3" fill="{color}"/>' for v, m in pts)
        parts.append(f'<text x="{left + pw - 40}" y="{top + 12 + 14 * k}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


# --------------------------------------------------------------------------- report


def report(paths: Sequence) -> str:
    """Markdown tables of mean and std over seeds for metric or ablation CSVs."""
    out = []
    for p in paths:
        with open(p, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out.append(f"### {Path(p).name}\n")
        if not rows:
            out.append("(empty)\n")
            continue
        keyed = "value" in rows[0]
        head = ["axis", "value", "split"] if keyed else ["split"]
        groups: dict[tuple, list[dict]] = {}
        for r in rows:
            if r.get("status", "ok") == "ok":
                groups.setdefault(tuple(r[h] for h in head), []).append(r)
        metrics = CSV_COLUMNS[2:]
        out.append("| " + " | ".join([*head, "n", *metrics]) + " |")
        out.append("|" + "---|" * (len(head) + 1 + len(metrics)))
        for key, rs in groups.items():
            cells = []
            for m in metrics:
                xs = np.array([float(r[m]) for r in rs])
                cells.append(f"{xs.mean():.3f} ± {xs.std():.3f}")
            out.append("| " + " | ".join([*key, str(len(rs)), *cells]) + " |")
        n_failed = sum(r.get("status") == "failed" for r in rows)
        if n_failed:
            out.append(f"\n{n_failed} failed run(s) excluded.")
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wpcl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        return p

    p = add("gen-data", "generate train / val_seen / val_unseen datasets")
    p.add_argument("--out", required=True)

    p = add("detect", "write per-observation object reports for expert histories")
    p.add_argument("--data", required=True)
    p.add_argument("--backend", choices=("oracle", "vlm"))
    p.add_argument("--splits", default="train", help="comma-separated")
    p.add_argument("--out")

    p = add("train", "two-stage training for every configured seed")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--detections")
    p.add_argument("--seeds", help="comma-separated override")

    p = add("eval", "metrics CSV for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val_unseen", choices=SPLITS)
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--policy", default="learned", choices=("learned", "expert", "random", "stop"))
    p.add_argument("--out")
    p.add_argument("--per-episode")

    p = add("ablate", "sweep one axis; tidy CSV plus SVG plot")
    p.add_argument("--axis", required=True, choices=tuple(ABLATION_AXES))
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="val_unseen", choices=SPLITS)
    p.add_argument("--seeds")

    p = add("report", "markdown summary of metric or ablation CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    return ap


def _ints(s):
    return [int(x) for x in s.split(",")] if s else None


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.cmd == "gen-data":
            for split, p in gen_data(cfg, args.out).items():
                print(f"{split}: {p}")
        elif args.cmd == "detect":
            stats = detect(cfg, args.data, args.backend, args.splits.split(","), args.out)
            print(json.dumps(stats, sort_keys=True))
        elif args.cmd == "train":
            m = run_train(cfg, args.data, args.run, args.detections, _ints(args.seeds))
            print(f"status={m['status']} config_hash={m['config_hash']}")
        elif args.cmd == "eval":
            text = run_eval(cfg, args.data, args.split, args.out, args.run, args.checkpoint, args.policy, args.per_episode)
            if args.out is None:
                sys.stdout.write(text)
        elif args.cmd == "ablate":
            try:
                values = [float(v) for v in args.values.split(",")]
            except ValueError as exc:
                raise ConfigError(f"--values: {exc}") from exc
            run_ablation(cfg, args.axis, values, args.out, args.data, args.split, _ints(args.seeds))
        elif args.cmd == "report":
            text = report(args.inputs)
            if args.out:
                atomic_write(args.out, text)
            else:
                print(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PartialFailure as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0
