"""``somnnet`` command line: synth, prepare, train, evaluate, count, predict, gradcheck.

Errors are reported as a single ``error: <kind>: <message>`` line on stderr
with exit status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import costs, signals
from .checkpoint import Checkpoint
from .compression import BinarizeHook, PruningHook, binarize_weights
from .errors import ConfigError, ParameterError, SomnError
from .gradcheck import run_suite
from .metrics import evaluate_metrics
from .model import build_reference_network, fit, predict_label, predict_proba

log = logging.getLogger("somnnet")

DEFAULT_SPARSITIES = "0,0.1,...,0.8"
DATA_ROOT_ENV = "SOMNNET_DATA_ROOT"


class CliError(SomnError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def parse_float_list(text: str) -> List[float]:
    """Comma list; ``a,b,...,c`` expands to the arithmetic progression a, b, ..., c."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if "..." in parts:
        i = parts.index("...")
        if i < 2 or i != len(parts) - 2:
            raise CliError(f"cannot expand {text!r}: use a,b,...,c")
        head = [float(p) for p in parts[:i]]
        step = head[-1] - head[-2]
        end = float(parts[-1])
        if step <= 0:
            raise CliError(f"cannot expand {text!r}: step must be positive")
        n = int(round((end - head[-1]) / step))
        return head + [round(head[-1] + step * (k + 1), 10) for k in range(n)]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise CliError(f"not a list of numbers: {text!r}") from None


def read_config(path: str, parser: argparse.ArgumentParser) -> Dict[str, object]:
    """``key = value`` lines; keys are option names (dashes or underscores)."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    values: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                values[dest] = action.type(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from None
        else:
            values[dest] = value
    return values


def _dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_dataset(data_path: str, manifest_path: Optional[str] = None):
    manifest = None
    mpath = Path(manifest_path) if manifest_path else Path(data_path + ".json")
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    elif manifest_path:
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    return signals.read_prepared(data_path, manifest), manifest


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.records):
        rid = f"synth{args.seed:03d}_{i:02d}"
        record, events = signals.synthesize_record(
            seed=args.seed * 1000 + i, duration_seconds=args.duration, event_rate=args.event_rate,
            artifact_rate=args.artifact_rate, record_id=rid)
        n = record.duration
        pulse = 60.0 + 5.0 * np.sin(np.arange(n) / 30.0)
        edf = signals.make_edf([
            {"label": "SpO2", "rate": signals.SAMPLE_RATE, "values": record.samples, "dimension": "%"},
            {"label": "Pulse", "rate": 1, "values": pulse, "physical_min": 0.0, "physical_max": 250.0,
             "dimension": "bpm"},
        ], recording=f"Startdate 01-JAN-2001 {rid}")
        (out / f"{rid}.edf").write_bytes(signals.write_edf(edf))
        (out / f"{rid}.txt").write_text(signals.format_annotations(events))
    print(f"wrote {args.records} records to {out}")
    return 0


def cmd_prepare(args) -> int:
    pairs = []
    inputs = list(args.input or [])
    if not inputs and not args.edf and os.environ.get(DATA_ROOT_ENV):
        inputs = [os.environ[DATA_ROOT_ENV]]
    for directory in inputs:
        if not Path(directory).is_dir():
            raise FileNotFoundError(f"input directory not found: {directory}")
        pairs.extend(signals.find_record_pairs(directory))
    if args.edf:
        if not args.annotations or len(args.annotations) != len(args.edf):
            raise CliError("--edf and --annotations must be given in matching pairs")
        pairs.extend(zip(map(Path, args.edf), map(Path, args.annotations)))
    if not pairs:
        raise CliError("no records: give --input DIR or --edf/--annotations pairs")
    exclude = [] if args.exclude == "" else [s.strip() for s in args.exclude.split(",") if s.strip()]
    records = [signals.load_record(e, a) for e, a in pairs]
    windows, manifest = signals.prepare_windows(records, exclude)
    for entry, (edf_path, ann_path) in zip(manifest["records"], pairs):
        entry["edf"] = edf_path.name
        entry["annotations"] = ann_path.name
    if not len(windows):
        raise ParameterError("no windows survived windowing and artifact rejection")
    signals.write_prepared(args.out, windows, manifest, args.manifest)
    print(f"wrote {len(windows)} windows ({int(windows.labels.sum())} apneic) to {args.out}")
    return 0


def _split(windows, seed: int):
    return signals.split_and_oversample(windows, (8, 1, 1), seed)


def cmd_train(args) -> int:
    windows, _ = _load_dataset(args.data, args.manifest)
    split = _split(windows, args.seed)
    if args.sparsity and args.binarize:
        raise CliError("--sparsity and --binarize are separate experiments; pick one")
    net = build_reference_network(args.seed)
    hooks = []
    steps_per_epoch = sum(1 for s in range(0, len(split.train), args.batch_size)
                          if min(args.batch_size, len(split.train) - s) >= 2)
    total = steps_per_epoch * args.epochs
    if args.sparsity:
        begin, end = int(0.2 * total), max(int(0.6 * total), int(0.2 * total) + 1)
        hooks.append(PruningHook(args.sparsity, begin, end, frequency=max(1, steps_per_epoch // 4)))
    if args.binarize:
        net, latent = binarize_weights(net)
        hooks.append(BinarizeHook(latent))
    ckpt, report = fit(net, (split.train.values, split.train.labels),
                       (split.validation.values, split.validation.labels),
                       epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                       learning_rate=args.learning_rate, l2_lambda=args.l2, hooks=hooks)
    test = evaluate_metrics(predict_label(predict_proba(net, split.test.values)), split.test.labels)
    report.test_metrics = test.to_dict()
    ckpt.metadata.update({
        "split_seed": args.seed, "sparsity": args.sparsity, "binarized": bool(args.binarize),
        "batch_size": args.batch_size, "learning_rate": args.learning_rate, "l2": args.l2,
    })
    ckpt.save(args.out)
    if args.report:
        payload = report.to_dict()
        payload["oversampling"] = split.oversampling
        _dump_json(args.report, payload)
    print(f"best epoch {report.best_epoch}; test {test.summary()}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.to_network()
    windows, manifest = _load_dataset(args.data, args.manifest)
    if args.split == "all":
        subset = windows
    else:
        seed = int(ckpt.metadata.get("split_seed", 0)) if args.split_seed is None else args.split_seed
        subset = getattr(_split(windows, seed), args.split)
    preds = predict_label(predict_proba(net, subset.values))
    report = evaluate_metrics(preds, subset.labels)
    payload = {"split": args.split, "count": len(subset), **report.to_dict()}
    if args.per_record:
        per = {}
        for rid in sorted(set(subset.record_ids.tolist())):
            sel = subset.record_ids == rid
            per[str(rid)] = evaluate_metrics(preds[sel], subset.labels[sel]).to_dict()
        payload["per_record"] = per
    if args.out:
        _dump_json(args.out, payload)
    print(report.summary())
    return 0


def cmd_count(args) -> int:
    sparsities = parse_float_list(args.sparsity)
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        config = ckpt.config
        binarized = bool(ckpt.binarized_layers)
        mask = {k: v != 0 for k, v in ckpt.params.items() if k.endswith(".kernel") or k.endswith(".weight")}
        reports = [costs.count_ops(config, 0.0, binarized, mode="mask-exact", mask=mask,
                                   anchor=args.anchor, label=Path(args.checkpoint).name)]
        if args.mode == "uniform":
            zero = sum(int(m.size - m.sum()) for m in mask.values()) / sum(m.size for m in mask.values())
            reports.append(costs.count_ops(config, round(zero, 4), binarized, anchor=args.anchor))
    else:
        from .model import reference_config
        config = reference_config()
        reports = [costs.count_ops(config, s, False, mode="uniform", anchor=args.anchor) for s in sparsities]
        if args.binarize:
            reports.append(costs.count_ops(config, 0.0, True, anchor=args.anchor))
    csv_text, table = costs.render_table(reports)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    sys.stdout.write(table)
    return 0


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.to_network()
    edf = signals.parse_edf(Path(args.edf).read_bytes())
    sig = edf.find(args.signal)
    rate = edf.sample_rate(sig)
    if abs(rate - signals.SAMPLE_RATE) > 1e-9:
        raise ParameterError(f"SpO2 sampled at {rate:g} Hz; only 8 Hz is supported")
    values = sig.physical()
    n_sec = len(values) // signals.SAMPLE_RATE
    record = signals.SpO2Record(Path(args.edf).stem, values[:n_sec * signals.SAMPLE_RATE],
                                np.zeros(n_sec, dtype=np.int8))
    windows = signals.extract_windows(record)
    lines = ["second\tlabel\tp_apneic"]
    if len(windows):
        ok = windows.values.min(axis=1) >= signals.ARTIFACT_THRESHOLD
        probs = predict_proba(net, windows.values.astype(np.float32).astype(np.float64))
        labels = predict_label(probs)
        for sec, good, lab, p in zip(windows.seconds, ok, labels, probs[:, 1]):
            lines.append(f"{sec}\t{lab}\t{p:.6f}" if good else f"{sec}\tartifact\t")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    worst = run_suite(range(args.seeds))
    failed = False
    for kind, err in worst.items():
        ok = err < args.tolerance
        failed |= not ok
        print(f"{kind:12s} max relative error {err:.3e} {'ok' if ok else 'FAIL'}")
    if failed:
        raise SomnError(f"gradient check exceeded tolerance {args.tolerance:g}")
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="somnnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate seeded synthetic EDF records + annotations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--records", type=int, default=4)
    p.add_argument("--duration", type=int, default=900, help="seconds per record")
    p.add_argument("--event-rate", type=float, default=0.25, help="expected apneic-second fraction")
    p.add_argument("--artifact-rate", type=float, default=0.002, help="per-second sensor dropout probability")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="window EDF records into a prepared dataset")
    p.add_argument("--input", action="append", help="directory of EDF + annotation files (repeatable)")
    p.add_argument("--edf", action="append")
    p.add_argument("--annotations", action="append")
    p.add_argument("--exclude", default=",".join(signals.DEFAULT_EXCLUDED),
                   help="comma-separated record ids to skip ('' for none)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train Model 1 (or Model 2 with --sparsity, Model 3 with --binarize)")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "validation", "test", "all"], default="test")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--per-record", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count", help="parameter / operation / energy table")
    p.add_argument("--sparsity", default=DEFAULT_SPARSITIES)
    p.add_argument("--binarize", action="store_true", help="append the binarized model row")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["uniform", "mask-exact"], default="uniform")
    p.add_argument("--anchor", choices=["published", "analytic"], default="published")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("predict", help="per-second labels for one EDF record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edf", required=True)
    p.add_argument("--signal", default="spo2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", help="key=value file supplying option defaults")
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.set_defaults(**read_config(args.config, sub))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SomnError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: file: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
    return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
