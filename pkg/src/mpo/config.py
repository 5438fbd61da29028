"""TOML run configuration: schema version 1.

Top-level keys: ``config_version`` (must be 1), ``seed``, and the tables
``[model]``, ``[dataset]``, ``[pattern]``, ``[train]``, ``[eval]``,
``[bn_experiment]``, ``[output]``.  Command-line overrides take precedence
over the file, which takes precedence over built-in defaults.  Outputs of
config-driven commands land in a per-run directory named from a hash of
the resolved configuration plus the seed, so reruns are self-identifying.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import models
from .datasets import Dataset, downsample_images, load_cifar10, load_idx, \
    make_synthetic
from .errors import ConfigError
from .nn import ModelSpec
from .patterns import Mask, checkerboard_mask, gen_random_mask, load_mask
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    """Resolved configuration plus the dict it was resolved from."""

    seed: int
    resolved: dict
    base_dir: Path

    @property
    def train(self) -> TrainConfig:
        section = dict(self.resolved.get("train", {}))
        section.setdefault("seed", self.seed)
        return TrainConfig.from_dict(section)

    def config_hash(self) -> str:
        canon = json.dumps(self.resolved, sort_keys=True, default=str,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def run_dir(self, out_root: Path | None = None) -> Path:
        root = Path(out_root) if out_root else \
            self.base_dir / self.resolved.get("output", {}).get("dir", "runs")
        return root / f"run-{self.config_hash()}-seed{self.seed}"

    # -- datasets ----------------------------------------------------------

    def _dataset_section(self) -> dict:
        section = self.resolved.get("dataset")
        if not section:
            raise ConfigError("config is missing a [dataset] table")
        return section

    def _resolve_path(self, value) -> Path:
        path = Path(value)
        if not path.is_absolute():
            path = self.base_dir / path
        if not path.exists():
            raise ConfigError(f"configured file does not exist: {path}")
        return path

    def load_datasets(self) -> tuple[Dataset, Dataset]:
        """Build (train, test) datasets per the [dataset] table."""
        sec = self._dataset_section()
        source = sec.get("source")
        if source == "synthetic":
            npc = int(sec.get("n_per_class", 512))
            test_npc = int(sec.get("test_n_per_class", max(1, npc // 2)))
            size = int(sec.get("image_size", 14))
            dseed = int(sec.get("seed", 0))
            train = make_synthetic(npc, size, seed=dseed, split="train")
            test = make_synthetic(test_npc, size, seed=dseed + 1, split="test")
        elif source == "idx":
            train = load_idx(self._resolve_path(sec["train_images"]),
                             self._resolve_path(sec["train_labels"]),
                             split="train")
            test = load_idx(self._resolve_path(sec["test_images"]),
                            self._resolve_path(sec["test_labels"]),
                            split="test")
        elif source == "cifar10":
            train = load_cifar10([self._resolve_path(p)
                                  for p in sec["train_files"]], split="train")
            test = load_cifar10([self._resolve_path(p)
                                 for p in sec["test_files"]], split="test")
        else:
            raise ConfigError(f"dataset.source must be synthetic/idx/cifar10, "
                              f"got {source!r}")

        keep_classes = sec.get("keep_classes")
        if keep_classes is not None:
            train = _relabel(train, keep_classes)
            test = _relabel(test, keep_classes)
        if "downsample_to" in sec:
            h, w = (int(v) for v in sec["downsample_to"])
            train = downsample_images(train, h, w)
            test = downsample_images(test, h, w)
        subset_seed = int(sec.get("subset_seed", 0))
        train = _limit(train, sec.get("train_limit"), subset_seed)
        test = _limit(test, sec.get("test_limit"), subset_seed + 1)
        if len(train) == 0 or len(test) == 0:
            raise ConfigError("configured dataset is empty")
        return train, test

    # -- model -------------------------------------------------------------

    def build_model(self, dataset: Dataset) -> ModelSpec:
        sec = dict(self.resolved.get("model", {}))
        input_shape = tuple(sec.pop("input_shape", dataset.sample_shape))
        num_classes = int(sec.pop("num_classes", dataset.num_classes))
        if "spec_json" in sec:
            path = self._resolve_path(sec["spec_json"])
            return models.spec_from_json(path.read_text())
        preset = sec.pop("preset", "mlp")
        kwargs = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in sec.items()}
        return models.build_preset(preset, input_shape, num_classes, **kwargs)

    # -- pattern -----------------------------------------------------------

    def build_mask(self) -> Mask:
        sec = self.resolved.get("pattern")
        if not sec:
            raise ConfigError("config is missing a [pattern] table")
        given = [k for k in ("mask_path", "random", "checkerboard") if k in sec]
        if len(given) != 1:
            raise ConfigError("pattern must define exactly one of mask_path, "
                              "random, checkerboard")
        if "mask_path" in sec:
            return load_mask(self._resolve_path(sec["mask_path"]),
                             sec.get("target_w"), sec.get("target_h"))
        if "random" in sec:
            r = sec["random"]
            try:
                return gen_random_mask(int(r["width"]), int(r["height"]),
                                       float(r["fill_prob"]),
                                       int(r.get("seed", self.seed)))
            except KeyError as exc:
                raise ConfigError(f"pattern.random missing {exc}") from exc
        c = sec["checkerboard"]
        try:
            return checkerboard_mask(int(c["width"]), int(c["height"]),
                                     int(c.get("block", 1)),
                                     int(c.get("border", 0)))
        except KeyError as exc:
            raise ConfigError(f"pattern.checkerboard missing {exc}") from exc

    # -- eval --------------------------------------------------------------

    def eval_settings(self) -> dict:
        sec = self.resolved.get("eval", {})
        return {
            "split": sec.get("split", "test"),
            "subsample": int(sec.get("subsample", 2048)),
            "batch_size": int(sec.get("batch_size", 256)),
            "margin": float(sec.get("margin", 2.0)),
            "oversample": int(sec.get("oversample", 2)),
        }

    def bn_experiment_settings(self) -> dict:
        sec = self.resolved.get("bn_experiment", {})
        probs = [float(p) for p in sec.get("fill_probs", [0.3, 0.5, 0.7])]
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"fill probability {p} outside [0, 1]")
        return {
            "fill_probs": probs,
            "runs": int(sec.get("runs", 3)),
            "mask_width": int(sec.get("mask_width", 30)),
            "mask_height": int(sec.get("mask_height", 30)),
            "preset": sec.get("preset", "tiny_conv"),
        }


def _relabel(ds: Dataset, keep_classes) -> Dataset:
    keep = [int(c) for c in keep_classes]
    sel = np.isin(ds.labels, keep)
    sub = ds.subset(np.nonzero(sel)[0])
    remap = {c: i for i, c in enumerate(keep)}
    labels = np.array([remap[int(l)] for l in sub.labels], dtype=np.int64)
    return Dataset(sub.images, labels, ds.split, ds.name)


def _limit(ds: Dataset, limit, seed: int) -> Dataset:
    if limit is None or len(ds) <= int(limit):
        return ds
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(order[:int(limit)]))


def _apply_overrides(raw: dict, overrides: dict) -> dict:
    """Deep-merge dotted-key overrides (e.g. 'train.iterations') into raw."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {key} is not a table")
        node[leaf] = value
    return raw


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a TOML config file and apply CLI overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    version = raw.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: config_version must be {CONFIG_VERSION}, "
                          f"got {version!r}")
    raw = _apply_overrides(raw, overrides or {})
    if "seed" not in raw:
        raise ConfigError(f"{path}: a top-level seed is required")
    return RunConfig(seed=int(raw["seed"]), resolved=raw,
                     base_dir=path.resolve().parent)
