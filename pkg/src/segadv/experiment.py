"""Experiment configuration and the on-disk pipeline behind the command line.

One INI file describes an experiment.  Each pipeline stage reads the
artifacts of the previous stage from the output directory and writes its own,
stamped with the SHA-256 of the resolved configuration.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks, imageio, metrics, scenegen, segnet, targets
from . import tensor_core as tc
from .attacks import AttackConfig
from .scenegen import SceneSpec
from .segnet import ModelConfig

log = logging.getLogger(__name__)

MODES = ("static", "dynamic", "fgsm", "llm")
SWEEP_AXES = ("eps", "omega", "tile", "m")


class ExperimentError(Exception):
    """Configuration or artifact problem, reported with the offending path and field."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


class MissingArtifact(ExperimentError):
    def __init__(self, path: Path, stage: str):
        super().__init__(str(path), f"missing artifact; run the '{stage}' step first")
        self.path = path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    train_size: int = 400
    epochs: int = 40
    lr: float = 0.1
    batch_size: int = 8
    lr_decay: float = 1.0


@dataclass(frozen=True)
class AttackPlan:
    mode: str = "static"
    universal: bool = True
    tile: tuple[int, int] | None = None
    m: int = 200
    v: int = 50
    val_offset: int | None = None
    hide_class: int = 4
    target: str = "least-overlap"
    target_pool: int = 50
    target_offset: int = 10_000
    target_flip: bool = True
    batch_size: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    plan: AttackPlan = field(default_factory=AttackPlan)
    victim2: ModelConfig | None = None
    victim2_seed_offset: int = 1
    sweep_axis: str | None = None
    sweep_values: tuple = ()
    render_count: int = 4

    @property
    def val_offset(self) -> int:
        p = self.plan
        return max(self.train.train_size, p.m) if p.val_offset is None else p.val_offset

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, scene=replace(self.scene, seed=seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")
        d["model"] = self.model.to_dict()
        d["victim2"] = None if self.victim2 is None else self.victim2.to_dict()
        return d

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        p = self.plan
        try:
            self.scene.validate()
            self.model.validate()
            self.attack.validate()
            if self.victim2 is not None:
                self.victim2.validate()
        except ValueError as exc:
            raise ExperimentError("config", str(exc)) from None
        if tuple(self.scene.size) != tuple(self.model.image_size):
            raise ExperimentError("config [scene] size", f"{self.scene.size} differs from [model] image_size "
                                  f"{self.model.image_size}")
        if p.mode not in MODES:
            raise ExperimentError("config [attack] mode", f"expected one of {MODES}, got {p.mode!r}")
        if p.m < 1 or p.v < 1 or self.train.train_size < 1:
            raise ExperimentError("config [data]", "m, v and train_size must be >= 1")
        if p.m > self.train.train_size:
            raise ExperimentError("config [data] m", f"m={p.m} exceeds train_size={self.train.train_size}")
        if p.tile is not None:
            try:
                attacks.check_tiling(self.model.image_size, p.tile)
            except attacks.AttackConfigError as exc:
                raise ExperimentError("config [attack] tile", str(exc)) from None
        if p.mode == "dynamic" and not 0 <= p.hide_class < self.model.num_classes:
            raise ExperimentError("config [attack] hide_class", f"{p.hide_class} is not a class index")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ExperimentError("config [sweep] axis", f"expected one of {SWEEP_AXES}, got {self.sweep_axis!r}")


def _number(text: str) -> float:
    return float(Fraction(text.strip()))


def _optional_number(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "no", "") else _number(text)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _pair(text: str) -> tuple[int, int] | None:
    if text.strip().lower() in ("none", "full", ""):
        return None
    v = _ints(text)
    return (v[0], v[0]) if len(v) == 1 else (v[0], v[1])


def _sweep_value(axis: str, text: str):
    if axis == "omega":
        return _optional_number(text)
    if axis == "tile":
        return _pair(text)
    if axis == "m":
        return int(text)
    return _number(text)


_SCENE_KEYS = {"buildings": _ints, "vehicles": _ints, "figures": _ints, "figure_prob": _number,
               "color_jitter": _number, "contrast": _number, "noise": _number, "target_class": int}
_MODEL_KEYS = {"num_classes": int, "widths": _ints, "skips": _ints, "input_scale": _number}
_TRAIN_KEYS = {"epochs": int, "lr": _number, "batch_size": int, "lr_decay": _number}
_ATTACK_KEYS = {"eps": _number, "alpha": _number, "n": int, "tau": _number, "omega": _optional_number}
_PLAN_KEYS = {"mode": str, "universal": None, "tile": _pair, "hide_class": int, "target": str,
              "target_pool": int, "target_offset": int, "target_flip": None, "batch_size": int}
_DATA_KEYS = {"m": int, "v": int, "val_offset": int, "train_size": int}


def _section(parser, name, spec, where):
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in spec:
            raise ExperimentError(f"{where} [{name}] {key}", "unknown key")
        conv = spec[key]
        try:
            out[key] = parser.getboolean(name, key) if conv is None else conv(raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ExperimentError(f"{where} [{name}] {key}", f"cannot parse {raw!r} ({exc})") from None
    return out


def parse_config(text: str, where: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ExperimentError(where, f"unparsable config ({exc.message})") from None
    known = {"experiment", "scene", "model", "train", "data", "attack", "victim2", "sweep", "render"}
    for name in parser.sections():
        if name not in known:
            raise ExperimentError(f"{where} [{name}]", "unknown section")

    top = _section(parser, "experiment", {"seed": int, "out": str}, where)
    seed = top.get("seed", 0)
    scene_kw = _section(parser, "scene", {**_SCENE_KEYS, "size": _pair}, where)
    size = scene_kw.pop("size", None) or (64, 64)
    scene = SceneSpec(size=size, seed=seed, **scene_kw)
    model_kw = _section(parser, "model", _MODEL_KEYS, where)
    model = ModelConfig(image_size=size, **model_kw)
    scene = replace(scene, num_classes=model.num_classes)
    train_kw = _section(parser, "train", _TRAIN_KEYS, where)
    data_kw = _section(parser, "data", _DATA_KEYS, where)
    train = TrainConfig(train_size=data_kw.pop("train_size", 400), **train_kw)
    attack_kw = _section(parser, "attack", {**_ATTACK_KEYS, **_PLAN_KEYS}, where)
    attack = AttackConfig(**{k: attack_kw.pop(k) for k in list(attack_kw) if k in _ATTACK_KEYS})
    plan = AttackPlan(**attack_kw, **data_kw)

    victim2, offset = None, 1
    if parser.has_section("victim2"):
        v2 = _section(parser, "victim2", {**_MODEL_KEYS, "seed_offset": int}, where)
        offset = v2.pop("seed_offset", 1)
        victim2 = replace(model, **v2)

    axis, values = None, ()
    if parser.has_section("sweep"):
        sw = _section(parser, "sweep", {"axis": str, "values": str}, where)
        axis = sw.get("axis")
        if axis not in SWEEP_AXES:
            raise ExperimentError(f"{where} [sweep] axis", f"expected one of {SWEEP_AXES}, got {axis!r}")
        try:
            values = tuple(_sweep_value(axis, t) for t in sw.get("values", "").split(";" if axis == "tile" else ","))
        except (ValueError, ZeroDivisionError) as exc:
            raise ExperimentError(f"{where} [sweep] values", str(exc)) from None
    render = _section(parser, "render", {"count": int}, where)

    cfg = ExperimentConfig(seed=seed, out=top.get("out"), scene=scene, model=model, train=train, attack=attack,
                           plan=plan, victim2=victim2, victim2_seed_offset=offset, sweep_axis=axis,
                           sweep_values=values, render_count=render.get("count", 4))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ExperimentError(str(path), f"cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _labels_tensor(y: np.ndarray) -> np.ndarray:
    return np.asarray(y, dtype=tc.DTYPE)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _csv_text(header: list[str], rows: list[list], sha: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_sha256 {sha}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _label(value, axis: str = "") -> str:
    if axis == "eps" and abs(value * 255 - round(value * 255)) < 1e-9:
        return f"{round(value * 255)}_255"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return "x".join(map(str, value))
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


_SUMMARY_COLS = ["success_rate", "hidden_rate", "background_preserved", "mean_iou", "clean_mean_iou"]


class Pipeline:
    """Stages of one experiment rooted at an output directory."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path, force: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.force = force
        self.sha = cfg.sha256()

    # paths -----------------------------------------------------------------
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def _require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, stage)
        return path

    def _check_stamp(self, path: Path, sha: str | None, what: str) -> None:
        if sha != self.sha and not self.force:
            raise ExperimentError(str(path), f"{what} was produced by config {sha}, current config is "
                                  f"{self.sha}; rerun the step or pass --force")

    # data ------------------------------------------------------------------
    def gen_data(self) -> dict:
        cfg = self.cfg
        d = self.path("data")
        d.mkdir(parents=True, exist_ok=True)
        train = scenegen.generate_dataset(cfg.scene, cfg.train.train_size)
        val = scenegen.generate_dataset(cfg.scene, cfg.plan.v, offset=cfg.val_offset)
        for name, samples in (("train", train), ("val", val)):
            x, y = scenegen.stack(samples)
            tc.save_tnsr(d / f"{name}_images.tnsr", x)
            tc.save_tnsr(d / f"{name}_truth.tnsr", _labels_tensor(y))
        manifest = {"config_sha256": self.sha, "train": [0, cfg.train.train_size],
                    "val": [cfg.val_offset, cfg.val_offset + cfg.plan.v],
                    "histogram": scenegen.class_histogram(train, cfg.model.num_classes).tolist()}
        _write_json(d / "manifest.json", manifest)
        log.info("wrote %d train and %d validation scenes to %s", len(train), len(val), d)
        return manifest

    def data(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        d = self.path("data")
        man = self._require(d / "manifest.json", "gen-data")
        self._check_stamp(man, json.loads(man.read_text()).get("config_sha256"), "dataset")
        x = tc.load_tnsr(self._require(d / f"{split}_images.tnsr", "gen-data"))
        y = tc.load_tnsr(self._require(d / f"{split}_truth.tnsr", "gen-data")).astype(np.int64)
        return x, y

    def attack_set(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.data("train")
        return x[:self.cfg.plan.m], y[:self.cfg.plan.m]

    # models ----------------------------------------------------------------
    def _train_one(self, mcfg: ModelConfig, seed: int, x, y) -> segnet.Checkpoint:
        t = self.cfg.train
        model = segnet.build_model(mcfg, seed)
        model = segnet.train(model, (x, y), t.epochs, t.lr, seed, batch_size=t.batch_size, lr_decay=t.lr_decay)
        return segnet.Checkpoint(model.config, model.params, {**model.meta, "config_sha256": self.sha})

    def train(self) -> list[Path]:
        x, y = self.data("train")
        written = []
        jobs = [("model_a.ckpt", self.cfg.model, self.cfg.seed)]
        if self.cfg.victim2 is not None:
            jobs.append(("model_b.ckpt", self.cfg.victim2, self.cfg.seed + self.cfg.victim2_seed_offset))
        for name, mcfg, seed in jobs:
            model = self._train_one(mcfg, seed, x, y)
            segnet.save(model, self.path(name))
            log.info("%s: seed %d, final loss %.4f", name, seed, model.meta["final_loss"])
            written.append(self.path(name))
        return written

    def model(self, which: str = "a") -> segnet.Checkpoint:
        path = self._require(self.path(f"model_{which}.ckpt"), "train")
        try:
            model = segnet.load(path)
        except segnet.CheckpointError as exc:
            raise ExperimentError(f"{path} field {exc.field!r}", str(exc)) from None
        self._check_stamp(path, model.meta.get("config_sha256"), "checkpoint")
        return model

    # targets ---------------------------------------------------------------
    def choose_static_target(self, model: segnet.Checkpoint) -> tuple[np.ndarray, int]:
        """A candidate scene's truth map, optionally flipped upside down.

        ``target = least-overlap`` picks, from ``target_pool`` candidate scenes,
        the one agreeing least with the model's clean predictions on the
        attack train set; ``target = scene:<k>`` takes candidate ``k``.
        """
        p = self.cfg.plan
        flip = (lambda t: t[::-1].copy()) if p.target_flip else (lambda t: t)
        if p.target.startswith("scene:"):
            k = int(p.target.split(":", 1)[1])
            return flip(scenegen.generate_sample(self.cfg.scene, p.target_offset + k).truth), k
        if p.target != "least-overlap":
            raise ExperimentError("config [attack] target", f"expected 'least-overlap' or 'scene:<k>', "
                                  f"got {p.target!r}")
        x, _ = self.attack_set()
        pred = segnet.predict_labels(model, x)
        cands = [flip(scenegen.generate_sample(self.cfg.scene, p.target_offset + k).truth)
                 for k in range(p.target_pool)]
        k, overlap = targets.least_overlap(cands, pred)
        log.info("static target: candidate %d, agreement with clean predictions %.3f", k, overlap[k])
        return cands[k], k

    def gen_target(self) -> dict:
        model = self.model("a")
        p = self.cfg.plan
        d = self.path("targets")
        d.mkdir(parents=True, exist_ok=True)
        info = {"config_sha256": self.sha, "model_sha256": model.digest(), "mode": p.mode}
        if p.mode == "static":
            y, k = self.choose_static_target(model)
            tc.save_tnsr(d / "static.tnsr", _labels_tensor(y))
            imageio.write_pgm(d / "static.pgm", y, f"config_sha256 {self.sha}")
            imageio.write_ppm_u8(d / "static.ppm", imageio.colorize(y), f"config_sha256 {self.sha}")
            info["candidate"] = k
        elif p.mode in ("dynamic", "llm"):
            for split in ("train", "val"):
                x, _ = self.data(split)
                probs = segnet.predict(model, x).probs
                specs = self._targets_from_probs(probs)
                tc.save_tnsr(d / f"{split}_target.tnsr", _labels_tensor(np.stack([t.y_target for t in specs])))
                if p.mode == "dynamic":
                    fg = np.stack([t.partition.fg for t in specs])
                    tc.save_tnsr(d / f"{split}_fg.tnsr", fg.astype(tc.DTYPE))
        _write_json(d / "targets.json", info)
        return info

    def _targets_from_probs(self, probs: np.ndarray) -> list[targets.TargetSpec]:
        if self.cfg.plan.mode == "llm":
            return [targets.least_likely_target(p) for p in probs]
        o = self.cfg.plan.hide_class
        try:
            return [targets.dynamic_target(segnet.labels_from_probs(p), o) for p in probs]
        except targets.EmptyBackgroundError as exc:
            raise ExperimentError("targets", f"class {o} covers a whole image ({exc})") from None

    def targets(self, split: str) -> list[targets.TargetSpec] | np.ndarray:
        d = self.path("targets")
        info_path = self._require(d / "targets.json", "gen-target")
        info = json.loads(info_path.read_text())
        self._check_stamp(info_path, info.get("config_sha256"), "target set")
        mode = self.cfg.plan.mode
        if mode == "static":
            return tc.load_tnsr(self._require(d / "static.tnsr", "gen-target")).astype(np.int64)
        if mode == "fgsm":
            return []
        y = tc.load_tnsr(self._require(d / f"{split}_target.tnsr", "gen-target")).astype(np.int64)
        if mode == "llm":
            return [targets.static_target(t) for t in y]
        fg = tc.load_tnsr(self._require(d / f"{split}_fg.tnsr", "gen-target")) > 0.5
        return [targets.TargetSpec(t, targets.PixelPartition(f, t), "dynamic") for t, f in zip(y, fg)]

    # attack ----------------------------------------------------------------
    def run_attack(self, attack: AttackConfig | None = None, plan: AttackPlan | None = None, trace=None):
        """Return the perturbation for the current config without writing it.

        Universal attacks give a :class:`attacks.Perturbation`; image-dependent
        ones a stack ``(v, C, H, W)`` aligned with the validation set.
        """
        attack = attack or self.cfg.attack
        plan = plan or self.cfg.plan
        model = self.model("a")
        if plan.universal:
            if plan.mode not in ("static", "dynamic"):
                raise ExperimentError("config [attack] universal", f"mode {plan.mode!r} is image-dependent only")
            x, _ = self.data("train")
            x = x[:plan.m]
            specs = self._train_targets(plan.m)
            return attacks.universal_perturbation(model, x, specs, attack, tile=plan.tile,
                                                  batch_size=plan.batch_size, trace=trace)
        xv, yv = self.data("val")
        if plan.mode == "fgsm":
            return np.stack([attacks.fgsm(model, xi, yi, attack.eps) for xi, yi in zip(xv, yv)])
        specs = self.targets("val")
        if plan.mode == "static":
            specs = [targets.static_target(specs)] * len(xv)
        return attacks.iterative_targeted(model, xv, specs, attack, trace=trace)

    def _train_targets(self, m: int) -> list[targets.TargetSpec]:
        t = self.targets("train")
        if self.cfg.plan.mode == "static":
            return [targets.static_target(t)] * m
        if len(t) < m:
            raise ExperimentError(str(self.path("targets")), f"only {len(t)} train targets for m={m}; "
                                  "rerun gen-target")
        return t[:m]

    def save_attack(self, pert, path: Path | None = None, **extra) -> Path:
        path = path or self.path("perturbation.tnsr")
        path.parent.mkdir(parents=True, exist_ok=True)
        stamp = {"config_sha256": self.sha, "model_sha256": self.model("a").digest(), **extra}
        if isinstance(pert, attacks.Perturbation):
            attacks.save_perturbation(pert, path, kind="universal", **stamp)
        else:
            tc.save_tnsr(path, pert)
            meta = {"kind": "image", "image_size": list(pert.shape[-2:]), "tile": list(pert.shape[-2:]),
                    **attacks.config_dict(self.cfg.attack), **stamp}
            _write_json(path.with_name(path.name + ".json"), meta)
        return path

    def attack(self) -> Path:
        pert = self.run_attack()
        path = self.save_attack(pert)
        log.info("wrote %s", path)
        return path

    def load_attack(self, path: Path | None = None):
        path = self._require(path or self.path("perturbation.tnsr"), "attack")
        side = path.with_name(path.name + ".json")
        meta = json.loads(self._require(side, "attack").read_text())
        model_sha = self.model("a").digest()
        if meta.get("model_sha256") != model_sha and not self.force:
            raise ExperimentError(f"{side} field 'model_sha256'", f"perturbation was made for model "
                                  f"{meta.get('model_sha256')}, not {model_sha}; pass --force to evaluate anyway")
        if meta.get("kind") == "image":
            return tc.load_tnsr(path), meta
        return attacks.load_perturbation(path), meta

    # evaluation ------------------------------------------------------------
    def reports(self, pert) -> dict[str, metrics.MetricsReport]:
        """Metric reports keyed by split ('val', plus 'train' and 'transfer' for universal runs)."""
        cfg = self.cfg
        model = self.model("a")
        mode = cfg.plan.mode
        xv, yv = self.data("val")
        out = {}
        static = self.targets("val") if mode == "static" else None
        if mode == "llm":
            static = np.stack([t.y_target for t in self.targets("val")])
        o = cfg.plan.hide_class if mode == "dynamic" else None
        out["val"] = metrics.evaluate_perturbation(model, xv, pert, truth=yv, static_target=static, o=o)
        if isinstance(pert, attacks.Perturbation):
            m = pert.meta.get("m", cfg.plan.m)
            xt, yt = self.data("train")
            out["train"] = metrics.evaluate_perturbation(model, xt[:m], pert, truth=yt[:m],
                                                         static_target=static, o=o)
            if cfg.victim2 is not None:
                out["transfer"] = metrics.transfer_eval(pert, self.model("b"), xv, yv, static, o)
        return out

    def evaluate(self) -> dict:
        pert, _ = self.load_attack()
        reps = self.reports(pert)
        d = self.path("reports")
        d.mkdir(parents=True, exist_ok=True)
        for split, rep in reps.items():
            (d / f"{split}.csv").write_text(f"# config_sha256 {self.sha}\n" + rep.to_csv())
        summary = {split: rep.summary() for split, rep in reps.items()}
        _write_json(d / "summary.json", {"config_sha256": self.sha, **summary})
        return summary

    # sweep -----------------------------------------------------------------
    def sweep(self, axis: str | None = None, values=None) -> Path:
        cfg = self.cfg
        axis = axis or cfg.sweep_axis
        values = cfg.sweep_values if values is None else values
        if axis not in SWEEP_AXES:
            raise ExperimentError("config [sweep] axis", f"expected one of {SWEEP_AXES}, got {axis!r}")
        if not values:
            raise ExperimentError("config [sweep] values", "no sweep values given")
        d = self.path("sweep")
        d.mkdir(parents=True, exist_ok=True)
        header = ["axis", "value", "split", "n"] + _SUMMARY_COLS
        merged = []
        for value in values:
            attack, plan = cfg.attack, cfg.plan
            if axis in ("eps", "omega"):
                attack = replace(attack, **{axis: value})
            else:
                plan = replace(plan, **{axis: value})
            if axis == "tile" and value is not None:
                attacks.check_tiling(cfg.model.image_size, value)
            if axis == "m" and not 1 <= value <= cfg.train.train_size:
                raise ExperimentError("config [sweep] values", f"m={value} outside 1..{cfg.train.train_size}")
            pert = self.run_attack(attack, plan)
            label = _label(value, axis)
            self.save_attack(pert, d / f"{axis}_{label}.tnsr")
            rows = []
            for split, rep in self.reports(pert).items():
                s = rep.summary()
                rows.append([axis, label, split, rep.n] + ["" if s[c] is None else f"{s[c]:.6f}"
                                                           for c in _SUMMARY_COLS])
            (d / f"{axis}_{label}.csv").write_text(_csv_text(header, rows, self.sha))
            merged.extend(rows)
            log.info("%s=%s: %s", axis, label, rows[0][4:])
        path = d / "merged.csv"
        path.write_text(_csv_text(header, merged, self.sha))
        return path

    # render ----------------------------------------------------------------
    def render(self) -> Path:
        pert, _ = self.load_attack()
        model = self.model("a")
        xv, yv = self.data("val")
        k = min(self.cfg.render_count, len(xv))
        xv, yv = xv[:k], yv[:k]
        full = pert.full()[None].repeat(k, 0) if isinstance(pert, attacks.Perturbation) else pert[:k]
        adv = attacks.apply(full, xv)
        clean_pred = segnet.predict_labels(model, xv)
        adv_pred = segnet.predict_labels(model, adv)
        d = self.path("render")
        d.mkdir(parents=True, exist_ok=True)
        note = f"config_sha256 {self.sha}"
        for i in range(k):
            imageio.write_ppm(d / f"{i:03d}_clean.ppm", xv[i], note)
            imageio.write_ppm(d / f"{i:03d}_adv.ppm", adv[i], note)
            imageio.write_ppm(d / f"{i:03d}_pert_x4.ppm", imageio.amplify(full[i]), note)
            for tag, lab in (("truth", yv[i]), ("seg_clean", clean_pred[i]), ("seg_adv", adv_pred[i])):
                imageio.write_pgm(d / f"{i:03d}_{tag}.pgm", lab, note)
                imageio.write_ppm_u8(d / f"{i:03d}_{tag}.ppm", imageio.colorize(lab), note)
        return d


def read_csv(path: str | Path) -> list[dict]:
    """Rows of a report CSV written by this module, skipping the checksum line."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
