"""Command-line entry point.

    tdconvs synth|train|eval|predict|gradcheck|bench --config PATH [--seed N] [--out DIR]

Exit codes: 0 success, 1 verification failure, 2 config error, 3 data
error. Every run echoes its fully resolved configuration into the output
directory. ``TDCONVS_THREADS`` caps internal worker parallelism (0 =
serial; the compute kernels are serial either way, the cap applies to
numba's thread pool).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import evalkit, kernels
from .config import RunConfig, parse_config, write_config
from .data import (ColumnSchema, load_ascii_points, normalize_patch,
                   pointset_to_table, sample_fixed, synth_scene, tile_patches,
                   write_ascii_points, write_patch_cache)
from .errors import (ConfigError, DataError, TdconvsError, VerificationError)
from .gradcheck import run_suite
from .geom import PointSet
from .net import Trainer, build_network, predict
from .tensor import load_checkpoint, save_checkpoint

LOSS_HEADER = "step,loss,loss_scale0,loss_scale1,loss_scale2,loss_scale3,loss_scale4,lr"
LOG_HEADER = LOSS_HEADER + ",seconds"


def _apply_thread_cap() -> None:
    val = os.environ.get("TDCONVS_THREADS")
    if not val:
        return
    n = int(val)
    if n > 0 and kernels.HAVE_NUMBA:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _resolve(path: str, out_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else out_dir / p


def _schema(cfg: RunConfig) -> ColumnSchema:
    return ColumnSchema(list(cfg.columns), cfg.n_classes, list(cfg.class_names))


def _load_patches(cfg: RunConfig, path: Path):
    if not path.exists():
        raise DataError(f"point file not found: {path}")
    table = load_ascii_points(path, _schema(cfg))
    patches = tile_patches(table, cfg.patch_size_m, source_id=path.stem)
    return table, patches


def _build_state(cfg: RunConfig, feat_dim: int):
    m_in = cfg.input_feat_dim if cfg.input_feat_dim > 0 else feat_dim
    return build_network(cfg.network_config(m_in), cfg.seed)


def cmd_synth(cfg: RunConfig, out_dir: Path) -> int:
    scene = synth_scene(cfg.seed, cfg.synth_points, cfg.n_classes)
    path = _resolve(cfg.train_path or "synth_scene.txt", out_dir)
    write_ascii_points(path, pointset_to_table(scene), _schema(cfg))
    hist = np.bincount(scene.labels, minlength=cfg.n_classes)
    print(f"wrote {scene.n} points to {path} (class counts: {hist.tolist()})")
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    path = _resolve(cfg.train_path, out_dir)
    if not cfg.train_path:
        raise ConfigError("data.train_path is required for training")
    _, patches = _load_patches(cfg, path)
    write_patch_cache(out_dir / "patches.tdpc", patches)
    norm = [normalize_patch(p) for p in patches]
    if any(ps.labels is None for ps in norm):
        raise DataError("training data has no label column")

    state = _build_state(cfg, norm[0].feat_dim)
    trainer = Trainer(state, cfg.lr)
    print(f"network: {state.param_count()} parameters, "
          f"{len(patches)} patches, kernels={kernels.ACTIVE}")

    steps = cfg.steps if cfg.steps > 0 else cfg.epochs * math.ceil(
        len(norm) / cfg.batch_size)
    order_rng = np.random.default_rng([cfg.seed, 1])

    def patch_cycle():
        while True:
            for i in order_rng.permutation(len(norm)):
                yield int(i)

    cycle = patch_cycle()
    visit = 0
    loss_lines = [LOSS_HEADER]
    log_lines = [LOG_HEADER]
    for step in range(1, steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            ps = norm[next(cycle)]
            batch.append(sample_fixed(ps, cfg.n_input_points,
                                      seed=[cfg.seed, 2, visit]))
            visit += 1
        t0 = time.perf_counter()
        loss, scales = trainer.step(batch)
        dt = time.perf_counter() - t0
        base = f"{step},{loss}," + ",".join(str(s) for s in scales) + f",{cfg.lr}"
        loss_lines.append(base)
        log_lines.append(base + f",{dt:.3f}")
        if step % max(cfg.checkpoint_every, 1) == 0:
            save_checkpoint(out_dir / f"model_step{step:06d}.tdcv",
                            state.to_checkpoint())
        if step == 1 or step % 50 == 0 or step == steps:
            print(f"step {step}/{steps} loss {loss:.4f} ({dt:.2f}s)")
    save_checkpoint(out_dir / "model_final.tdcv", state.to_checkpoint())
    (out_dir / "loss.csv").write_text("\n".join(loss_lines) + "\n")
    (out_dir / "train_log.csv").write_text("\n".join(log_lines) + "\n")
    print(f"final checkpoint: {out_dir / 'model_final.tdcv'}")
    return 0


def _infer_patch(state, ps: PointSet, n_input: int, seed) -> np.ndarray:
    """Predict a class for every point: seeded permutation, fixed-size
    windows with wrap-around padding, first prediction wins."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(ps.n)
    preds = np.full(ps.n, -1, dtype=np.int64)
    assigned = np.zeros(ps.n, dtype=bool)
    n_chunks = math.ceil(ps.n / n_input)
    for c in range(n_chunks):
        window = np.take(order, np.arange(c * n_input, (c + 1) * n_input) % ps.n)
        sub = ps.subset(window)
        chunk_pred = predict(sub, state)
        uniq, first = np.unique(window, return_index=True)
        fresh = ~assigned[uniq]
        preds[uniq[fresh]] = chunk_pred[first[fresh]]
        assigned[uniq[fresh]] = True
    return preds


def _run_inference(cfg: RunConfig, out_dir: Path, path: Path):
    table, patches = _load_patches(cfg, path)
    norm = [normalize_patch(p) for p in patches]
    state = _build_state(cfg, norm[0].feat_dim)
    ckpt = _resolve(cfg.checkpoint or "model_final.tdcv", out_dir)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    state.load_entries(load_checkpoint(ckpt))
    row_preds = np.full(table.coords.shape[0], -1, dtype=np.int64)
    for pidx, (patch, ps) in enumerate(zip(patches, norm)):
        preds = _infer_patch(state, ps, cfg.n_input_points,
                             seed=[cfg.seed, 3, pidx])
        row_preds[patch.rows] = preds
    return table, row_preds


def cmd_eval(cfg: RunConfig, out_dir: Path) -> int:
    path = _resolve(cfg.eval_path or cfg.train_path, out_dir)
    table, row_preds = _run_inference(cfg, out_dir, path)
    if table.labels is None:
        raise DataError("evaluation data has no label column")
    cm = evalkit.confusion(table.labels, row_preds, cfg.n_classes)
    report = evalkit.build_report(cm, cfg.class_names or None)
    evalkit.emit_report(report, out_dir / "metrics.csv", "csv")
    evalkit.emit_report(report, out_dir / "metrics.json", "json")
    print(f"OA {report.oa:.4f}  mF1 {report.mf1:.4f}  "
          f"({cm.total} points, reports in {out_dir})")
    return 0


def cmd_predict(cfg: RunConfig, out_dir: Path) -> int:
    path = _resolve(cfg.eval_path or cfg.train_path, out_dir)
    _, row_preds = _run_inference(cfg, out_dir, path)
    out_path = out_dir / "predictions.txt"
    row = 0
    with open(path) as src, open(out_path, "w") as dst:
        for line in src:
            if not line.split():
                dst.write(line)
                continue
            dst.write(line.rstrip("\n") + f" {row_preds[row]}\n")
            row += 1
    print(f"wrote per-point labels to {out_path}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out_dir: Path, n_seeds: int) -> int:
    results = run_suite(n_seeds=n_seeds)
    failures = []
    for name, err, tol in results:
        status = "PASS" if err < tol else "FAIL"
        print(f"{name:28s} max rel err {err:.3e}  (tol {tol:g})  {status}")
        if err >= tol:
            failures.append(name)
    if failures:
        raise VerificationError("gradient check failed for: " + ", ".join(failures))
    return 0


def cmd_bench(cfg: RunConfig, out_dir: Path) -> int:
    rows = benchmod.run_bench(seed=cfg.seed)
    benchmod.write_csv(out_dir / "bench.csv", rows)
    for op, n, grid, med, p95 in rows:
        print(f"{op:24s} n={n:<7d} grid={grid:<8s} median {med:10.1f}us  p95 {p95:10.1f}us")
    benchmod.self_check(seed=cfg.seed)
    print(f"self-check passed; CSV at {out_dir / 'bench.csv'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tdconvs",
        description="Deformable point convolutions for ALS segmentation")
    parser.add_argument("command", choices=[
        "synth", "train", "eval", "predict", "gradcheck", "bench"])
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--profile", default=None,
                        help="override the config file's profile")
    parser.add_argument("--seeds", type=int, default=5,
                        help="seeds per op for gradcheck")
    args = parser.parse_args(argv)

    _apply_thread_cap()
    try:
        cfg = parse_config(args.config, profile=args.profile)
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = Path(args.out or cfg.out_dir or f"runs/{cfg.profile}")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config(out_dir / "config_resolved.txt", cfg)
        if args.command == "synth":
            return cmd_synth(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir)
        if args.command == "predict":
            return cmd_predict(cfg, out_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out_dir, args.seeds)
        if args.command == "bench":
            return cmd_bench(cfg, out_dir)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: config: {_oneline(exc)}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: data: {_oneline(exc)}", file=sys.stderr)
        return 3
    except VerificationError as exc:
        print(f"error: verification: {_oneline(exc)}", file=sys.stderr)
        return 1
    except TdconvsError as exc:
        print(f"error: {type(exc).__name__}: {_oneline(exc)}", file=sys.stderr)
        return 1


def _oneline(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
