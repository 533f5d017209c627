"""``stagenet`` command line: generate, train, predict, evaluate, subtype, gradcheck.

Every command accepts ``--config FILE`` (JSON, field names as in
``GeneratorConfig`` / ``ModelConfig``); explicit flags override file values
and ``STAGENET_SEED`` supplies the seed when neither sets one. Each run
writes its resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration or usage, 3 data, 4 numeric or
training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .data import (ConfigError, DataError, GeneratorConfig, StatsError, fit_normalizer,
                   forward_fill_and_normalize, generate_synthetic, load_dataset, save_dataset)
from .evaluation import METRICS, MetricError, bootstrap
from .model import (CheckpointError, ModelConfig, TrainingError, check_gradients,
                    load_checkpoint, save_checkpoint, train)
from .subtyping import prepare, subtype

log = logging.getLogger("stagenet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path}: {e.msg} at line {e.lineno}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(args, file_cfg: dict, flag_map: dict[str, str], allowed) -> dict:
    """File values, then explicit flags, then the STAGENET_SEED fallback."""
    names = {f.name for f in fields(allowed)}
    unknown = set(file_cfg) - names
    if unknown:
        raise UsageError(f"unknown config fields {sorted(unknown)}")
    out = dict(file_cfg)
    for flag, name in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            out[name] = value
    if "seed" not in out:
        env = os.environ.get("STAGENET_SEED")
        if env is not None:
            try:
                out["seed"] = int(env)
            except ValueError:
                raise UsageError(f"STAGENET_SEED must be an integer, got {env!r}") from None
    return out


# commands -------------------------------------------------------------------------

GEN_FLAGS = {"n_patients": "n_patients", "n_features": "n_features", "seed": "seed",
             "jump_magnitude": "jump_magnitude", "n_archetypes": "n_archetypes",
             "missing_rate": "missing_rate"}

MODEL_FLAGS = {"hidden": "hidden", "chunk": "chunk", "window": "window",
               "bottleneck": "bottleneck", "dropout": "dropout_p",
               "dropconnect": "dropconnect_p", "lr": "learning_rate", "epochs": "epochs",
               "batch_size": "batch_size", "seed": "seed", "delta_scale": "delta_scale",
               "max_len": "max_len", "grad_clip": "grad_clip", "variant": "variant"}


def cmd_generate(args) -> int:
    values = _resolve(args, _read_config(args.config), GEN_FLAGS, GeneratorConfig)
    cfg = GeneratorConfig(**values)
    dataset = generate_synthetic(cfg)
    out = Path(args.out)
    save_dataset(dataset, out)
    _dump(cfg.to_dict(), _sidecar(out))
    print(f"wrote {len(dataset)} patients to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_raw = load_dataset(args.train)
    valid_raw = load_dataset(args.valid)
    values = _resolve(args, _read_config(args.config), MODEL_FLAGS, ModelConfig)
    values.setdefault("n_features", train_raw[0].n_features)
    if values["n_features"] != train_raw[0].n_features:
        raise UsageError(f"config n_features {values['n_features']} but data has "
                         f"{train_raw[0].n_features}")
    if valid_raw[0].n_features != train_raw[0].n_features:
        raise DataError(f"{args.valid}: {valid_raw[0].n_features} features, "
                        f"training data has {train_raw[0].n_features}")
    cfg = ModelConfig(**values)
    cfg.validate()

    init = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    stats = init.normalizer if init is not None and init.normalizer is not None \
        else fit_normalizer(train_raw)
    train_set = forward_fill_and_normalize(train_raw, stats)
    valid_set = forward_fill_and_normalize(valid_raw, stats)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(cfg.to_dict(), out / "config.json")
    with open(out / "metrics.jsonl", "w") as log_fh:
        def on_epoch(row):
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
            print(f"epoch {row['epoch']} loss {row['train_loss']:.4f} "
                  f"valid auprc {row['valid_auprc']:.4f}")
        ckpt, _ = train(cfg, train_set, valid_set, init=init, normalizer=stats,
                        on_epoch=on_epoch)
    save_checkpoint(ckpt, out / "checkpoint.json")
    print(f"best epoch {ckpt.epoch}; checkpoint written to {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = prepare(ckpt, load_dataset(args.data))
    if data[0].n_features != ckpt.config.n_features:
        raise DataError(f"{args.data}: {data[0].n_features} features, "
                        f"checkpoint expects {ckpt.config.n_features}")
    traces = ckpt.build_model().predict(data)
    out = Path(args.out)
    n = 0
    with open(out, "w") as fh:
        for tr in traces:
            for j, t in enumerate(tr.steps):
                fh.write(json.dumps({"patient_id": tr.patient_id, "t": int(t),
                                     "y_hat": float(tr.y_hat[j]), "s": float(tr.s[j]),
                                     "u_tilde": tr.u_tilde[j].tolist()}) + "\n")
                n += 1
    _dump({"checkpoint": str(args.checkpoint), "data": str(args.data)}, _sidecar(out))
    print(f"wrote {n} predictions to {out}")
    return EXIT_OK


def _read_predictions(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {lineno}: malformed JSON ({e.msg})") from None
    if not rows:
        raise DataError(f"{path}: no predictions")
    return rows


def cmd_evaluate(args) -> int:
    rows = _read_predictions(args.predictions)
    labels = {s.patient_id: s.labels for s in load_dataset(args.data)}
    y_hat, y = [], []
    for r in rows:
        try:
            y.append(labels[r["patient_id"]][r["t"]])
        except KeyError:
            raise DataError(f"prediction for unknown patient {r.get('patient_id')!r}") from None
        except IndexError:
            raise DataError(f"patient {r['patient_id']}: t={r['t']} is past the last visit") \
                from None
        y_hat.append(r["y_hat"])
    y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
    report = {"n_visits": len(y), "prevalence": float(y.mean())}
    seed = args.seed if args.seed is not None else int(os.environ.get("STAGENET_SEED", 0))
    for name, fn in METRICS.items():
        report[name] = fn(y_hat, y)
        if args.bootstrap:
            b = bootstrap(y_hat, y, fn, args.bootstrap, seed=seed)
            report[f"{name}_bootstrap"] = {"mean": b.mean, "std": b.std,
                                           "n_used": b.n_used, "n_skipped": b.n_skipped}
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        _dump({"predictions": str(args.predictions), "data": str(args.data),
               "bootstrap": args.bootstrap, "seed": seed}, _sidecar(out))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_subtype(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if args.k < 2 or args.k > len(data):
        raise UsageError(f"k must be between 2 and the number of patients ({len(data)}), "
                         f"got {args.k}")
    seed = args.seed if args.seed is not None else int(os.environ.get("STAGENET_SEED", 0))
    res = subtype(ckpt, data, args.k, seed)
    out = Path(args.out)
    _dump(res.to_dict(), out)
    _dump({"checkpoint": str(args.checkpoint), "data": str(args.data), "k": args.k,
           "seed": seed}, _sidecar(out))
    print(f"C-H score {res.clusters.ch_score:.4g}; cluster label rates "
          f"{[round(r, 4) for r in res.clusters.cluster_risk]}")
    return EXIT_OK


def _dims(text: str) -> tuple[int, int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims expects N_v,N_h,C,K integers, got {text!r}")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"--dims expects 4 values N_v,N_h,C,K, got {text!r}")
    return parts


def cmd_gradcheck(args) -> int:
    n_v, n_h, c, k = args.dims
    seed = args.seed if args.seed is not None else int(os.environ.get("STAGENET_SEED", 0))
    try:
        rep = check_gradients(n_v, n_h, c, k, args.patients, args.steps, seed=seed,
                              tol_rel=args.tol)
    except ValueError as e:
        raise UsageError(str(e)) from None
    d = rep.to_dict()
    d["max_rel_err_overall"] = rep.worst
    text = json.dumps(d, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _dump({"dims": list(args.dims), "patients": args.patients, "steps": args.steps,
               "seed": seed, "tol": args.tol}, _sidecar(Path(args.out)))
    print(f"max rel-err {rep.worst:.3e} (tol {args.tol:g}): {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log debug output")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-patients", dest="n_patients", type=int)
    g.add_argument("--n-features", dest="n_features", type=int)
    g.add_argument("--jump-magnitude", dest="jump_magnitude", type=float)
    g.add_argument("--n-archetypes", dest="n_archetypes", type=int)
    g.add_argument("--missing-rate", dest="missing_rate", type=float)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and keep the best checkpoint")
    t.add_argument("--config")
    t.add_argument("--train", required=True)
    t.add_argument("--valid", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--init-checkpoint", dest="init_checkpoint")
    for flag, typ in (("hidden", int), ("chunk", int), ("window", int), ("bottleneck", int),
                      ("dropout", float), ("dropconnect", float), ("lr", float),
                      ("epochs", int), ("batch-size", int), ("seed", int),
                      ("delta-scale", float), ("max-len", int), ("grad-clip", float)):
        t.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ)
    t.add_argument("--variant", choices=("stagenet", "lstm"))
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="per-visit predictions as JSONL")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="AUROC, AUPRC and min(Re, P+) of a predictions file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bootstrap", type=int, default=0, metavar="N")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("subtype", help="k-means on last-visit representations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_subtype)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    gc.add_argument("--dims", type=_dims, default=(4, 8, 2, 3), help="N_v,N_h,C,K")
    gc.add_argument("--patients", type=int, default=2)
    gc.add_argument("--steps", type=int, default=6)
    gc.add_argument("--seed", type=int)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"stagenet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StatsError, CheckpointError, FileNotFoundError, MetricError) as e:
        print(f"stagenet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericError) as e:
        print(f"stagenet: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TypeError, ValueError) as e:
        # remaining config validation failures (bad field types, dimension checks)
        print(f"stagenet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
