"""Command line entry point: ``mld <command> --config run.yaml ...``.

Commands::

    gen-data     --out data.mmld
    train-ae     --data data.mmld --out ae/                 (ae/<name>.mmld, ae/ae_loss.csv)
    train-score  --data data.mmld --ae ae/ --out score.mmld [--mode] [--log score_loss.csv]
    sample       --ae ae/ --score score.mmld --out samples.mmld
                 [--condition m0=cond.mmld,...] [--method] [--repaint] [--count] [--csv] [--pgm-dir]
    eval         --data data.mmld --ae ae/ --score score.mmld --out metrics.csv
    ablate-d     --data data.mmld --ae ae/ --d-list 0.1,0.5,1 --out ablate.csv

CSV headers:

* ``ae_loss.csv``: ``modality,epoch,loss``
* training log: ``step,loss,omega,a2_size,t,grad_norm``
* eval: ``metric,modality,condition_set,value,n_samples,seed``
* ablate-d: ``d`` followed by the eval columns

Exit codes: 0 ok, 2 bad config or arguments, 3 NaN/Inf, 4 file I/O.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, pipeline
from .config import load_config
from .data import load_dataset, save_dataset
from .diffusion import TRAINING_MODES
from .errors import ConfigError, MLDError

log = logging.getLogger("mld")


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def scatter_pgm(points, size: int = 128) -> bytes:
    """Binary PGM (P5) of a 2-D point cloud; dark pixels where points land."""
    pts = np.asarray(points, dtype=np.float64)
    img = np.full((size, size), 255, dtype=np.uint8)
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        ij = np.clip(((pts - lo) / span * (size - 1)).round().astype(int), 0, size - 1)
        img[size - 1 - ij[:, 1], ij[:, 0]] = 0
    return f"P5\n{size} {size}\n255\n".encode() + img.tobytes()


def parse_conditions(spec: str | None, names: list[str]) -> dict[str, str]:
    if not spec:
        return {}
    out = {}
    for item in spec.split(","):
        name, sep, path = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"--condition entry {item!r} is not modality=path")
        if name not in names:
            raise ConfigError(f"--condition: unknown modality {name!r}; known {names}")
        out[name] = path
    return out


def parse_d_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--d-list: {exc}") from None


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _data(cfg, path):
    ds = load_dataset(path)
    pipeline.check_dataset(cfg, ds)
    return ds


def cmd_gen_data(args):
    cfg = _config(args)
    ds = pipeline.make_dataset(cfg)
    save_dataset(args.out, ds)
    log.info("wrote %d samples x %d modalities to %s", len(ds), len(ds.names), args.out)


def cmd_train_ae(args):
    cfg = _config(args)
    train, _ = pipeline.train_test_split(cfg, _data(cfg, args.data))
    rows = []
    encoder = pipeline.train_autoencoders(cfg, train, rows)
    pipeline.save_autoencoders(args.out, encoder)
    write_csv(Path(args.out) / "ae_loss.csv", rows, ("modality", "epoch", "loss"))


def cmd_train_score(args):
    cfg = _config(args)
    train, _ = pipeline.train_test_split(cfg, _data(cfg, args.data))
    encoder = pipeline.load_autoencoders(cfg, args.ae)
    rows = []
    trainer = pipeline.train_score(cfg, encoder, train, args.mode, steps=args.steps,
                                   log_fn=lambda out: rows.append(pipeline.score_log_row(out)))
    trainer.save(args.out)
    log_path = args.log or Path(args.out).with_suffix(".csv")
    write_csv(log_path, rows, pipeline.SCORE_LOG_COLUMNS)


def cmd_sample(args):
    cfg = _config(args)
    names = cfg.layout().names
    encoder = pipeline.load_autoencoders(cfg, args.ae)
    net, mode = pipeline.load_score(cfg, args.score)
    cond = {}
    for name, path in parse_conditions(args.condition, names).items():
        tensors = checkpoint.load(path)
        key = f"data.{name}"
        if key not in tensors:
            raise ConfigError(f"{path}: no tensor {key!r}")
        cond[names.index(name)] = tensors[key]
    count = args.count
    if count is None:
        count = max((len(np.atleast_2d(x)) for x in cond.values()), default=cfg.eval.n_samples)
    z, decoded = pipeline.sample(cfg, net, mode, encoder, cond, count, args.method, args.repaint)
    tensors = {"latent": z}
    tensors.update({f"data.{n}": x for n, x in zip(names, decoded)})
    checkpoint.save(args.out, tensors)
    if args.csv:
        header = [f"{n}_{k}" for n, x in zip(names, decoded) for k in range(x.shape[1])]
        np.savetxt(args.csv, np.concatenate(decoded, axis=1), delimiter=",", header=",".join(header),
                   comments="", fmt="%.17g")
    if args.pgm_dir:
        Path(args.pgm_dir).mkdir(parents=True, exist_ok=True)
        for n, x in zip(names, decoded):
            if x.shape[1] == 2:
                (Path(args.pgm_dir) / f"{n}.pgm").write_bytes(scatter_pgm(x))


def cmd_eval(args):
    cfg = _config(args)
    train, test = pipeline.train_test_split(cfg, _data(cfg, args.data))
    encoder = pipeline.load_autoencoders(cfg, args.ae)
    net, mode = pipeline.load_score(cfg, args.score)
    classifiers = pipeline.train_classifiers(cfg, train)
    rows = pipeline.evaluate(cfg, net, mode, encoder, classifiers, test, tuple(args.methods.split(",")))
    write_csv(args.out, rows, pipeline.EVAL_COLUMNS)


def cmd_ablate_d(args):
    cfg = _config(args)
    train, test = pipeline.train_test_split(cfg, _data(cfg, args.data))
    encoder = pipeline.load_autoencoders(cfg, args.ae)
    rows = pipeline.ablate_d(cfg, encoder, train, test, parse_d_list(args.d_list), steps=args.steps)
    write_csv(args.out, rows, ("d",) + pipeline.EVAL_COLUMNS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mld", description="multi-modal latent diffusion toolchain")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        c = sub.add_parser(name, help=help)
        c.add_argument("--config", required=True, help="YAML run configuration")
        c.add_argument("--seed", type=int, default=None, help="override the config seed")
        c.set_defaults(fn=fn)
        return c

    c = command("gen-data", cmd_gen_data, "write a synthetic dataset")
    c.add_argument("--out", required=True)

    c = command("train-ae", cmd_train_ae, "train per-modality autoencoders")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True, help="output directory")

    c = command("train-score", cmd_train_score, "train the score network on joint latents")
    c.add_argument("--data", required=True)
    c.add_argument("--ae", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--mode", choices=TRAINING_MODES, default="multitime")
    c.add_argument("--steps", type=int, default=None, help="override score.steps")
    c.add_argument("--log", default=None, help="loss CSV (default: OUT with .csv suffix)")

    c = command("sample", cmd_sample, "joint or conditional generation")
    c.add_argument("--ae", required=True)
    c.add_argument("--score", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--condition", default=None, help="modality=dataset.mmld[,...]")
    c.add_argument("--method", choices=("multitime", "inpaint"), default="multitime")
    c.add_argument("--repaint", action="store_true", help="use the configured resampling schedule")
    c.add_argument("--count", type=int, default=None)
    c.add_argument("--csv", default=None)
    c.add_argument("--pgm-dir", default=None)

    c = command("eval", cmd_eval, "coherence, FMD and robustness scan")
    c.add_argument("--data", required=True)
    c.add_argument("--ae", required=True)
    c.add_argument("--score", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--methods", default="multitime,inpaint")

    c = command("ablate-d", cmd_ablate_d, "retrain the score network for several d")
    c.add_argument("--data", required=True)
    c.add_argument("--ae", required=True)
    c.add_argument("--d-list", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int, default=None, help="override score.steps")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except MLDError as exc:
        print(f"mld {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mld {args.command}: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"mld {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
