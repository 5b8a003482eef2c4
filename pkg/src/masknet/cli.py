"""Command-line front door: train, eval, report, export, verify.

Exit codes are stable:
  0  success
  1  verification failure or unexpected error
  2  configuration error (stderr names the offending field)
  3  capacity error (keep fractions exceed a shared layer)
  4  data or artifact error (missing, empty, or corrupt files)
  5  unknown task

stderr errors are one line, machine parsable: ``masknet: error=<id>: <message>``.
Data paths in configs resolve against --data, or $MASKNET_DATA, or the
current directory. Heavy imports happen after flag parsing so --threads can
pin the BLAS pool before anything numeric loads.
"""

import argparse
import json
import os
import sys
import time

from .errors import (
    CapacityError,
    ConfigError,
    FormatError,
    InputError,
    MasknetError,
    TaskError,
)

EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_CAPACITY = 3
EXIT_DATA = 4
EXIT_TASK = 5


def _fail(code: int, error_id: str, message) -> int:
    print(f"masknet: error={error_id}: {message}", file=sys.stderr)
    return code


def _data_root(args) -> str:
    return args.data or os.environ.get("MASKNET_DATA", ".")


def _write_json(path, obj) -> None:
    from .ioutil import atomic_write_bytes
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True)
                              + "\n").encode())


def _hash_file(path) -> str:
    from .ioutil import sha256_file
    return sha256_file(path)


def _forgetting_csv(log) -> str:
    lines = ["after_group,task,test_loss,test_metric"]
    for row in log.rows:
        lines.append(f"{row.after_group},{row.task},"
                     f"{row.test_loss:.10g},{row.test_metric:.10g}")
    return "\n".join(lines) + "\n"


def _print_eval(report, name=""):
    title = f"task {report.task}" + (f" ({name})" if name else "")
    print(f"{title}: {report.kind}, {report.count} examples")
    if report.kind == "regression":
        print(f"  mse: {report.mse:.6f}")
        return
    print(f"  accuracy: {report.accuracy:.4f}")
    print("  class  f1")
    for c, f1 in enumerate(report.f1):
        print(f"  {c:>5}  {f1:.4f}")


def _report_dict(report) -> dict:
    out = {"task": report.task, "kind": report.kind, "count": report.count}
    if report.kind == "classification":
        out["accuracy"] = report.accuracy
        out["f1"] = list(report.f1)
        out["confusion"] = report.confusion.tolist()
    else:
        out["mse"] = report.mse
    return out


def cmd_train(args) -> int:
    from dataclasses import replace

    from . import __version__
    from .config import (
        build_from_config,
        parse_config_text,
        prepare_all,
        serialize_config,
    )
    from .ioutil import atomic_write_bytes, sha256_bytes
    from .modelio import save_checkpoint, save_dense, save_sparse
    from .multitask import build_model, disjointness_check
    from .pruning import (
        AvailabilityLedger,
        PruneConfig,
        commit_mask,
        select_subnetwork,
        validate_capacity,
    )
    from .tensor import Rng
    from .training import ForgettingLog, evaluate, record_forgetting, train_group

    started = time.time()
    try:
        with open(args.config, "rb") as f:
            config_bytes = f.read()
    except OSError as e:
        raise ConfigError("config", f"cannot read {args.config}: {e}") from None
    config = parse_config_text(config_bytes.decode())
    if args.seed is not None:
        config.seed = args.seed
        config_bytes = serialize_config(config).encode()
    out_dir = args.out or config.out
    os.makedirs(out_dir, exist_ok=True)

    data, states, shapes = prepare_all(config, _data_root(args))
    model = build_from_config(config, shapes)
    prune = PruneConfig(
        keep_fractions={t: task.p for t, task in enumerate(config.tasks)},
        probe_batch_size=config.probe_batch_size, seed=config.seed)
    validate_capacity(model, prune)
    ledger = AvailabilityLedger(model)

    rows = []
    log = ForgettingLog()
    trained = []
    root_rng = Rng(config.seed)
    for gi, group in enumerate(config.schedule.groups):
        for task in group:
            probe = (data[task].x_train[:config.probe_batch_size],
                     data[task].y_train[:config.probe_batch_size])
            selection = select_subnetwork(model, task, probe, prune, ledger)
            commit_mask(model, task, selection, ledger)
            for r in selection.records:
                rows.append({"event": "select", "group": gi, "task": r.task,
                             "slot": r.slot, "kind": r.kind,
                             "budget": r.budget, "bias_budget": r.bias_budget,
                             "threshold": r.threshold,
                             "free_before": r.free_before,
                             "free_after": r.free_after})
        history = train_group(model, group, data, config.optimizer,
                              config.early_stop,
                              seed=root_rng.spawn(f"train/group{gi}").seed,
                              max_epochs=config.max_epochs,
                              batch_sizes={t: task.batch_size
                                           for t, task in enumerate(config.tasks)
                                           if task.batch_size})
        for event in history:
            rows.append({"group": gi, **event})
        trained.extend(group)
        for row in record_forgetting(log, model, gi, trained, data,
                                     config.optimizer.batch_size):
            rows.append({"event": "eval", "after_group": row.after_group,
                         "task": row.task, "loss": row.test_loss,
                         "metric": row.test_metric})

    finals = {}
    for t in range(len(config.tasks)):
        report = evaluate(model, t, data[t].x_test, data[t].y_test,
                          config.optimizer.batch_size)
        finals[t] = report
        _print_eval(report, config.tasks[t].name)
    for slot in model.slots:
        if slot.maskable:
            overlap = disjointness_check(slot).max_overlap
            print(f"slot {slot.index} ({slot.kind}): max_overlap={overlap}")

    # artifacts: config copy, metrics, forgetting curve, checkpoints, sizes
    paths = {
        "config": os.path.join(out_dir, "config.yaml"),
        "metrics": os.path.join(out_dir, "metrics.jsonl"),
        "forgetting": os.path.join(out_dir, "forgetting.csv"),
        "checkpoint": os.path.join(out_dir, "model.ckpt"),
        "sparse": os.path.join(out_dir, "model.smt"),
    }
    atomic_write_bytes(paths["config"], config_bytes)
    atomic_write_bytes(paths["metrics"], "".join(
        json.dumps(r, sort_keys=True) + "\n" for r in rows).encode())
    atomic_write_bytes(paths["forgetting"], _forgetting_csv(log).encode())
    save_checkpoint(paths["checkpoint"], model, ledger=ledger,
                    extra={"preprocess": states,
                           "groups_done": len(config.schedule.groups)})
    save_sparse(paths["sparse"], model, preprocess=states)
    for t, task in enumerate(config.tasks):
        solo = [replace(spec, tasks=None) for spec in config.layers
                if spec.routes(t)]
        single = build_model(solo, {0: task.loss}, {0: shapes[t]},
                             Rng(config.seed))
        paths[f"dedicated_{t}"] = os.path.join(out_dir, f"dedicated_task{t}.bin")
        save_dense(paths[f"dedicated_{t}"], single)

    manifest = {
        "name": config.name,
        "version": __version__,
        "config_hash": sha256_bytes(config_bytes).hex(),
        "seed": config.seed,
        "wall_clock_seconds": round(time.time() - started, 3),
        "tasks": {str(t): {"name": config.tasks[t].name,
                           "kind": finals[t].kind,
                           "metric": finals[t].metric}
                  for t in finals},
        "artifacts": {name: {"path": os.path.basename(p),
                             "sha256": _hash_file(p)}
                      for name, p in paths.items()},
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    print(f"run complete: {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .config import load_config, prepare_task
    from .modelio import load_sparse
    from .tensor import Rng
    from .training import evaluate

    model, header = load_sparse(args.model)
    config = load_config(args.config)
    task = args.task
    model.check_task(task)
    stored = (header.get("preprocess") or {}).get(str(task))
    data, _ = prepare_task(config, task, _data_root(args), Rng(config.seed),
                           stored=stored)
    split = {"test": (data.x_test, data.y_test),
             "val": (data.x_val, data.y_val),
             "train": (data.x_train, data.y_train)}[args.split]
    report = evaluate(model, task, split[0], split[1])
    _print_eval(report, config.tasks[task].name)
    if args.out:
        _write_json(args.out, _report_dict(report))
    return 0


def cmd_report(args) -> int:
    from .errors import ChecksumError
    from .modelio import size_report

    manifest_path = os.path.join(args.run, "manifest.json")
    if not os.path.exists(manifest_path):
        raise InputError(f"no manifest at {manifest_path}; is this a run directory?")
    with open(manifest_path) as f:
        manifest = json.load(f)
    for name, entry in manifest["artifacts"].items():
        path = os.path.join(args.run, entry["path"])
        if not os.path.exists(path):
            raise InputError(f"artifact {name} missing: {path}")
        actual = _hash_file(path)
        if actual != entry["sha256"]:
            raise ChecksumError(
                f"artifact {name} was modified after the run: "
                f"sha256 {actual} != manifest {entry['sha256']}")

    with open(os.path.join(args.run, "forgetting.csv")) as f:
        print(f.read(), end="")
    dedicated = [os.path.join(args.run, entry["path"])
                 for name, entry in manifest["artifacts"].items()
                 if name.startswith("dedicated_")]
    sizes = size_report(os.path.join(args.run, "model.smt"), dedicated)
    print(f"multitask_bytes={sizes['multitask_bytes']} "
          f"dedicated_bytes={sizes['dedicated_bytes']} "
          f"ratio={sizes['ratio']:.4f}")
    return 0


def cmd_export(args) -> int:
    from .modelio import export_sparse, load_checkpoint
    from .ioutil import atomic_write_bytes

    bundle = load_checkpoint(args.ckpt)
    preprocess = bundle.extra.get("preprocess")
    blob = export_sparse(bundle.model, preprocess=preprocess)
    atomic_write_bytes(args.out, blob)
    print(f"wrote {args.out}: {len(blob)} bytes "
          f"(checkpoint was {os.path.getsize(args.ckpt)})")
    return 0


def _random_check_net(rng):
    """One small random network and a matching batch, all in float64."""
    import numpy as np
    from .layers import Activation, Loss
    from .multitask import SlotSpec, build_model

    flavor = int(rng.integers(0, 3))
    if flavor == 0:  # dense stack
        width = int(rng.integers(3, 9))
        specs = [SlotSpec(kind="dense", units=width,
                          activation=Activation.RELU),
                 SlotSpec(kind="dense", units=3,
                          activation=Activation.SOFTMAX)]
        loss, in_shape = Loss.CCE, (int(rng.integers(2, 7)),)
        y = np.eye(3)[rng.integers(0, 3, 2)]
    elif flavor == 1:  # conv trunk
        specs = [SlotSpec(kind="conv2d", filters=int(rng.integers(2, 5)),
                          size=(3, 3), padding="same",
                          activation=Activation.RELU),
                 SlotSpec(kind="maxpool"),
                 SlotSpec(kind="flatten"),
                 SlotSpec(kind="dense", units=1)]
        loss, in_shape = Loss.MSE, (6, 6, 2)
        y = rng.uniform(-1, 1, (2, 1))
    else:  # embedding path
        vocab, dim = 11, int(rng.integers(2, 5))
        specs = [SlotSpec(kind="embedding", vocab=vocab, dim=dim),
                 SlotSpec(kind="flatten"),
                 SlotSpec(kind="dense", units=1)]
        loss, in_shape = Loss.BCE, (5,)
        y = rng.integers(0, 2, (2, 1)).astype(np.float64)

    model = build_model(specs, {0: loss}, {0: in_shape}, rng.spawn("init"))
    for slot in model.slots:
        if slot.maskable:
            slot.kernel = slot.kernel.astype(np.float64)
            slot.bias = slot.bias.astype(np.float64)
            slot.masks = np.ones_like(slot.kernel)
            slot.bias_masks = np.ones_like(slot.bias)
            slot.committed.add(0)
        elif slot.kind == "embedding":
            slot.table = slot.table.astype(np.float64)
    if specs[0].kind == "embedding":
        x = rng.integers(0, vocab, (2,) + in_shape)
    else:
        x = rng.uniform(-1, 1, (2,) + in_shape)
    return model, x, y


def gradient_check(model, x, y, rng, h=1e-3, samples=4):
    """Max relative error between analytic gradients and central differences.

    Every sampled coordinate is probed at h and again at h/2. When the two
    difference quotients disagree, a ReLU or pool-switch boundary sits
    inside the probe interval, where a difference quotient estimates the
    derivative of neither side; such coordinates are skipped.
    """
    import numpy as np
    from .multitask import mt_backward, mt_loss

    grads = mt_backward(model, x, y, 0)
    worst = 0.0

    def fd(param, flat_index, step):
        original = param.flat[flat_index]
        param.flat[flat_index] = original + step
        up = mt_loss(model, x, y, 0)
        param.flat[flat_index] = original - step
        down = mt_loss(model, x, y, 0)
        param.flat[flat_index] = original
        return (up - down) / (2 * step)

    for slot_index, g in grads.slot_grads.items():
        slot = model.slots[slot_index]
        if "table" in g:
            names = {"table": (slot.table, g["table"])}
        else:
            ch = slot.channel(0)
            names = {"kernel": (slot.kernel[ch], g["kernel"]),
                     "bias": (slot.bias[ch], g["bias"])}
        for param, analytic in names.values():
            count = min(samples, param.size)
            for i in rng.choice(param.size, count):
                numeric = fd(param, int(i), h)
                halved = fd(param, int(i), h / 2)
                if abs(numeric - halved) > 1e-4 * max(abs(numeric),
                                                      abs(halved), 1e-6):
                    continue
                scale = max(abs(numeric), abs(analytic.flat[int(i)]), 1e-6)
                worst = max(worst, abs(numeric - analytic.flat[int(i)]) / scale)
    return worst


def cmd_verify(args) -> int:
    from .modelio import load_sparse
    from .multitask import disjointness_check
    from .tensor import Rng

    failures = 0
    if args.model:
        model, _ = load_sparse(args.model)
        for slot in model.slots:
            if not slot.maskable:
                continue
            report = disjointness_check(slot)
            status = "ok" if report.ok else "OVERLAP"
            print(f"slot {slot.index} ({slot.kind}): "
                  f"max_overlap={report.max_overlap} {status}")
            failures += 0 if report.ok else 1

    rng = Rng(args.seed)
    worst = 0.0
    for i in range(args.checks):
        net_rng = rng.spawn(f"check{i}")
        model, x, y = _random_check_net(net_rng)
        err = gradient_check(model, x, y, net_rng.spawn("coords"))
        worst = max(worst, err)
        if err >= 1e-3:
            failures += 1
            print(f"gradient check {i}: max_rel_err={err:.3e} FAIL")
    print(f"gradient checks: {args.checks} nets, max_rel_err={worst:.3e} "
          f"{'ok' if worst < 1e-3 else 'FAIL'}")
    if failures:
        print(f"verification failed: {failures} problem(s)", file=sys.stderr)
        return EXIT_VERIFY
    print("verification passed")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masknet",
        description="Train disjoint per-task subnetworks inside one network.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a config end to end")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    train.add_argument("--out", default=None,
                       help="override the config output directory")
    train.add_argument("--data", default=None,
                       help="data root (default: $MASKNET_DATA or .)")
    train.add_argument("--threads", type=int, default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate an exported model on a task")
    ev.add_argument("--model", required=True, help="path to a .smt export")
    ev.add_argument("--config", required=True,
                    help="config describing the datasets")
    ev.add_argument("--task", type=int, required=True)
    ev.add_argument("--split", choices=("train", "val", "test"),
                    default="test")
    ev.add_argument("--data", default=None)
    ev.add_argument("--out", default=None, help="also write the report JSON")
    ev.add_argument("--threads", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report",
                         help="verify artifacts, print forgetting and sizes")
    rep.add_argument("--run", required=True, help="run directory")
    rep.set_defaults(func=cmd_report)

    exp = sub.add_parser("export", help="checkpoint -> sparse model file")
    exp.add_argument("--ckpt", required=True)
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=cmd_export)

    ver = sub.add_parser("verify",
                         help="disjointness audit plus gradient spot checks")
    ver.add_argument("--model", default=None, help="optional .smt to audit")
    ver.add_argument("--checks", type=int, default=10,
                     help="random networks to gradient-check")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--threads", type=int, default=None)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except CapacityError as e:
        return _fail(EXIT_CAPACITY, "capacity", e)
    except TaskError as e:
        return _fail(EXIT_TASK, "task", e)
    except (InputError, FormatError) as e:
        return _fail(EXIT_DATA, "data", e)
    except OSError as e:
        return _fail(EXIT_DATA, "io", e)
    except MasknetError as e:
        return _fail(EXIT_VERIFY, "internal", e)


if __name__ == "__main__":
    sys.exit(main())
