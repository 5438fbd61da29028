"""Command-line entry points.

Subcommands: fit-pattern, eval-grid, render, gen-mask, bn-experiment,
check-grad.  Config-driven commands read a TOML file (see config.py) and
write their outputs under a run directory named by config hash and seed.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
degeneracy error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import statistics
import sys
import warnings
from pathlib import Path

import numpy as np

from . import models
from .config import RunConfig, load_run_config
from .errors import (ConfigError, DegenerateDirectionError, DiffUndefinedError,
                     InputError, MpoError, ParseError, SnapshotError)
from .landscape import (GridExtent, GridResult, black_white_metrics, eval_grid,
                        grid_correlation, render_heatmap)
from .nn import param_count
from .patterns import derive_cell_sets, gen_random_mask, save_mask
from .plane import PlaneParams
from .snapshot import load_plane, load_sidecar, save_plane
from .training import TrainConfig, init_plane, mpo_objective, sample_cells, \
    train

UNDEFINED = "undefined"


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_resolved_config(cfg: RunConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.json").write_text(
        json.dumps(cfg.resolved, indent=2, sort_keys=True, default=str) + "\n")


def _load_plane_checked(path, spec) -> PlaneParams:
    plane = load_plane(path)
    n = param_count(spec)
    if plane.n != n:
        raise ConfigError(f"snapshot holds {plane.n} parameters but the "
                          f"configured model has {n}")
    meta = load_sidecar(path)
    if meta and meta.get("model_spec_sha256") not in (None,
                                                      models.spec_hash(spec)):
        warnings.warn("snapshot sidecar records a different model spec hash")
    return plane


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit_pattern(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    train_ds, _ = cfg.load_datasets()
    spec = cfg.build_model(train_ds)
    mask = cfg.build_mask()
    run_dir = cfg.run_dir(args.out)
    _write_resolved_config(cfg, run_dir)

    plane, report = train(spec, train_ds, mask, cfg.train)
    report.to_csv(run_dir / "report.csv")
    sidecar = {"model_spec_sha256": models.spec_hash(spec),
               "train_config": cfg.train.to_dict(),
               "mask_shape": [mask.height, mask.width]}
    save_plane(plane, run_dir / "plane.mpo", sidecar=sidecar)
    (run_dir / "model.json").write_text(models.spec_to_json(spec) + "\n")

    last = report.rows[-1] if report.rows else None
    print(f"run dir: {run_dir}")
    if last:
        print(f"iteration {last.iteration}: objective={last.objective:.4f} "
              f"black_ce={last.black_ce:.4f} white_ce={last.white_ce_clamped:.4f} "
              f"scale={last.scale:.5f}")
    return 0


def cmd_eval_grid(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    train_ds, test_ds = cfg.load_datasets()
    spec = cfg.build_model(train_ds)
    mask = cfg.build_mask()
    settings = cfg.eval_settings()
    split = args.split or settings["split"]
    dataset = train_ds if split == "train" else test_ds
    plane = _load_plane_checked(args.plane, spec)

    if args.supersample:
        extent = GridExtent.render_default(mask, margin=settings["margin"],
                                           oversample=settings["oversample"])
    else:
        extent = GridExtent.integer_grid(mask)
    subsample = 0 if args.full else settings["subsample"]
    grid = eval_grid(spec, plane, dataset, extent,
                     eval_batch_size=settings["batch_size"],
                     subsample=subsample)

    run_dir = cfg.run_dir(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    suffix = "super" if args.supersample else "grid"
    out_csv = run_dir / f"{suffix}-{split}.csv"
    grid.to_csv(out_csv)
    print(f"grid: {out_csv}")

    if not args.supersample:
        try:
            m = black_white_metrics(grid, mask)
            metrics = {"mean_acc_black": m.mean_acc_black,
                       "mean_acc_white": m.mean_acc_white, "diff": m.diff}
        except DiffUndefinedError as exc:
            metrics = {"mean_acc_black": exc.mean_acc_black,
                       "mean_acc_white": exc.mean_acc_white, "diff": UNDEFINED}
        (run_dir / f"metrics-{split}.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True, default=str) + "\n")
        print(f"metrics: {metrics}")
    return 0


def cmd_render(args) -> int:
    grid = GridResult.from_csv(args.grid)
    out = render_heatmap(grid, args.channel, args.out, upscale=args.upscale)
    print(f"wrote {out}")
    return 0


def cmd_gen_mask(args) -> int:
    mask = gen_random_mask(args.width, args.height, args.fill_prob, args.seed)
    save_mask(args.out, mask)
    print(f"wrote {args.out} ({int(mask.pixels.sum())} black of "
          f"{mask.num_cells} cells)")
    return 0


def cmd_bn_experiment(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    train_ds, test_ds = cfg.load_datasets()
    settings = cfg.bn_experiment_settings()
    run_dir = cfg.run_dir(args.out)
    _write_resolved_config(cfg, run_dir)

    results_path = run_dir / "results.csv"
    rows = []
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "run", "arch", "mean_black", "mean_white", "diff"])
        for p in settings["fill_probs"]:
            for run_idx in range(settings["runs"]):
                run_seed = cfg.seed + run_idx
                mask = gen_random_mask(settings["mask_width"],
                                       settings["mask_height"], p,
                                       seed=run_seed)
                for arch, use_bn in (("no_bn", False), ("bn", True)):
                    spec = models.build_preset(settings["preset"],
                                               train_ds.sample_shape,
                                               train_ds.num_classes,
                                               batch_norm=use_bn)
                    tc_dict = cfg.train.to_dict()
                    tc_dict["seed"] = run_seed
                    plane, _ = train(spec, train_ds, mask,
                                     TrainConfig.from_dict(tc_dict))
                    es = cfg.eval_settings()
                    grid = eval_grid(spec, plane, test_ds,
                                     GridExtent.integer_grid(mask),
                                     eval_batch_size=es["batch_size"],
                                     subsample=es["subsample"])
                    try:
                        m = black_white_metrics(grid, mask)
                        row = (p, run_idx, arch, m.mean_acc_black,
                               m.mean_acc_white, m.diff)
                    except DiffUndefinedError as exc:
                        row = (p, run_idx, arch, exc.mean_acc_black,
                               exc.mean_acc_white, None)
                    rows.append(row)
                    writer.writerow([_fmt(p), run_idx, arch,
                                     *(UNDEFINED if v is None or
                                       (isinstance(v, float) and np.isnan(v))
                                       else _fmt(v) for v in row[3:])])
                    fh.flush()  # partial results survive a failed later run
                    print(f"p={p} run={run_idx} arch={arch}: "
                          f"{'diff=%.4f' % row[5] if row[5] is not None else UNDEFINED}")

    aggregate_rows(rows).to_file(run_dir / "aggregate.csv")
    print(f"results: {results_path}")
    return 0


class _Aggregate:
    def __init__(self, rows):
        self.rows = rows

    def to_file(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", "arch", "n", "diff_mean", "diff_std",
                             "black_mean", "black_std", "white_mean",
                             "white_std"])
            writer.writerows(self.rows)


def aggregate_rows(rows) -> _Aggregate:
    """Aggregate per-(p, arch) mean and population standard deviation of
    the diff and the per-class means; undefined diffs are skipped and the
    marker emitted when no run was defined."""
    groups: dict[tuple, list] = {}
    for p, _run, arch, black, white, diff in rows:
        groups.setdefault((p, arch), []).append((black, white, diff))
    out = []
    for (p, arch), values in sorted(groups.items()):
        cols = []
        for k in range(3):
            defined = [v[k] for v in values
                       if v[k] is not None and not np.isnan(v[k])]
            if defined:
                cols.append((statistics.fmean(defined),
                             statistics.pstdev(defined)))
            else:
                cols.append(None)
        black, white, diff = cols
        n = len(values)

        def pair(col):
            return (UNDEFINED, UNDEFINED) if col is None \
                else (_fmt(col[0]), _fmt(col[1]))

        out.append([_fmt(p), arch, n, *pair(diff), *pair(black), *pair(white)])
    return _Aggregate(out)


def cmd_check_grad(args) -> int:
    import mpo

    worst = 0.0
    for k in range(args.instances):
        seed = args.seed + k
        if k % 2 == 0:
            spec = models.mlp((1, 4, 4), 3, hidden=(5,))
        else:
            spec = models.conv_classifier((1, 5, 5), 3, channels=(2,),
                                          pool_to=(2, 2), hidden=4)
        plane = init_plane(spec, seed, 0.1)
        rng = np.random.default_rng(seed)
        batch = mpo.Batch(rng.random((4,) + spec.input_shape),
                          rng.integers(0, spec.num_classes, 4))
        mask = gen_random_mask(3, 3, 0.5, seed=seed)
        if mask.pixels.sum() in (0, mask.num_cells):
            mask = gen_random_mask(3, 3, 0.5, seed=seed + 1000)
        cells = sample_cells(derive_cell_sets(mask), 9,
                             np.random.default_rng(seed))
        res = mpo_objective(spec, plane, cells, batch)

        flat = plane.to_flat()
        h = 1e-5
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (mpo_objective(spec, PlaneParams.from_flat(up, plane.n),
                                   cells, batch).objective
                     - mpo_objective(spec, PlaneParams.from_flat(down, plane.n),
                                     cells, batch).objective) / (2 * h)
        analytic = res.grads.to_flat()
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
        rel = float((np.abs(fd - analytic) / scale).max())
        worst = max(worst, rel)
        print(f"instance {k} (n={plane.n}, 3n+1={plane.num_trainable}): "
              f"max rel err {rel:.3e}")
    if worst > 1e-4:
        raise DegenerateDirectionError(
            f"gradient audit failed: max rel err {worst:.3e} > 1e-4")
    print(f"gradient audit passed (worst {worst:.3e})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        out["train.iterations"] = args.iterations
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpo",
        description="Fit binary patterns into neural-network loss landscapes "
                    "via a trainable 2D plane in weight space.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pattern", help="train a plane to fit a pattern")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default=None, help="output root directory")
    p.set_defaults(func=cmd_fit_pattern)

    p = sub.add_parser("eval-grid", help="evaluate loss/accuracy over the plane")
    p.add_argument("--config", required=True)
    p.add_argument("--plane", required=True)
    p.add_argument("--split", choices=("train", "test"), default=None)
    p.add_argument("--full", action="store_true",
                   help="evaluate on the full split, no subsampling")
    p.add_argument("--supersample", action="store_true",
                   help="dense non-integer grid with a margin, for rendering")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_grid)

    p = sub.add_parser("render", help="render a grid CSV as a heatmap image")
    p.add_argument("--grid", required=True)
    p.add_argument("--channel", choices=("loss", "accuracy"), default="loss")
    p.add_argument("--out", required=True)
    p.add_argument("--upscale", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gen-mask", help="generate a random binary mask")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--fill-prob", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_mask)

    p = sub.add_parser("bn-experiment",
                       help="random-mask fit quality with/without batch norm")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bn_experiment)

    p = sub.add_parser("check-grad",
                       help="audit plane gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=3)
    p.set_defaults(func=cmd_check_grad)
    return parser


@contextlib.contextmanager
def _thread_cap(threads):
    if threads is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        warnings.warn("--threads needs threadpoolctl; running uncapped")
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_cap(args.threads):
            return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, SnapshotError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateDirectionError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except MpoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
