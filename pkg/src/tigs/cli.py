"""``tigs`` command-line interface.

Exit codes: 0 ok, 1 usage, 2 format/IO, 3 shape, 4 value.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Phase, TigsConfig
from .diagnostics import export_rank_heatmap, mechanism_stats
from .errors import FormatError, ShapeError
from .pipeline import ToyModel, bench, logits_from_probabilities, tigs_transform, write_timing_csv
from .screening import ScreeningReport, screen_tensor
from .smoothing import softmax
from .synth import SynthSpec, make_attention_suite, make_distributed_suite
from .tensor_io import AttentionTensor, ContentMask, TensorKind, load_tensor, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_SHAPE, EXIT_VALUE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which is our format code
        raise UsageError(message)


def _warn(msg: str) -> None:
    print(f"tigs: warning: {msg}", file=sys.stderr)


def _config_from_args(args: argparse.Namespace) -> TigsConfig:
    if getattr(args, "config", None):
        cfg = TigsConfig.load(args.config)
    else:
        _warn("no --config given; using default hyperparameters")
        cfg = TigsConfig()
    try:
        cfg = cfg.with_overrides(args.override or [])
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    changes: dict = {}
    if getattr(args, "phase", None):
        changes["phase"] = Phase(args.phase)
    if getattr(args, "prefill_len", None) is not None:
        changes["prefill_len"] = args.prefill_len
    if getattr(args, "layers", None):
        try:
            changes["layers"] = frozenset(int(x) for x in args.layers.split(",") if x.strip())
        except ValueError as exc:
            raise UsageError(f"bad --layers value {args.layers!r}") from exc
    return cfg.replace(**changes) if changes else cfg


def _load_input(args: argparse.Namespace) -> AttentionTensor:
    kind = TensorKind.PROBABILITIES if args.probabilities else None
    return load_tensor(args.input, kind=kind, causal=True if args.causal else None)


def _write_text(path: str, text: str) -> None:
    Path(path).write_text(text + "\n", encoding="utf-8")


def cmd_screen(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    tensor = _load_input(args)
    mask = ContentMask.load(args.mask)
    if tensor.kind is TensorKind.LOGITS:
        tensor = AttentionTensor(softmax(tensor.data), TensorKind.PROBABILITIES, tensor.causal)
    report = screen_tensor(tensor, mask, cfg)
    _write_text(args.output, report.to_json())
    return EXIT_OK


def cmd_smooth(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    tensor = _load_input(args)
    mask = ContentMask.load(args.mask)
    if tensor.kind is TensorKind.PROBABILITIES:
        tensor = logits_from_probabilities(tensor, cfg.epsilon)
    result = tigs_transform(tensor, mask, cfg)
    save_tensor(result.attention_out, args.output)
    if args.report:
        _write_text(args.report, result.report.to_json())
    if args.timing:
        write_timing_csv(args.timing, [result.timing])
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        seq_len=args.seq_len,
        delta=args.delta,
        trigger_index=args.trigger_index,
        noise_scale=args.noise,
        n_collapsed_heads=args.triggered,
        structural_sink=args.sink,
        seed=args.seed,
        n_heads=args.heads,
        causal=args.causal,
    )
    if args.distributed:
        suite = make_distributed_suite(args.delta, args.triggered, spec, layers=args.n_layers)
    else:
        suite = make_attention_suite(args.heads - args.triggered, args.triggered, spec, layers=args.n_layers)
    prefix = args.output
    save_tensor(suite.tensor, f"{prefix}.npy")
    suite.mask.save(f"{prefix}.mask.json")
    _write_text(f"{prefix}.labels.json", json.dumps(suite.labels, sort_keys=True))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    tensor = load_tensor(
        args.input,
        kind=TensorKind.PROBABILITIES if args.probabilities else None,
        causal=True if args.causal else None,
        validate=False,
    )
    tensor.validate()
    print(f"ok: {tensor.kind.value} tensor of shape {list(tensor.shape)}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    model = ToyModel.init(seed=args.seed, n_layers=args.n_layers, n_heads=args.heads, d_head=args.d_head)
    summary = bench(model, cfg, repeats=args.repeats, warmup=args.warmup, n_tokens=args.tokens, seed=args.seed)
    text = json.dumps(summary.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write("arm,run,nanoseconds\n")
            for arm, stats in (("undefended", summary.undefended), ("defended", summary.defended)):
                for run, ns in enumerate(stats.samples_ns):
                    fh.write(f"{arm},{run},{ns}\n")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        report = ScreeningReport.from_json(Path(args.input).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{args.input}: malformed report") from exc
    lambda_act = args.lambda_act
    if lambda_act is None:
        beta = report.config.get("beta", TigsConfig().beta)
        lambda_act = report.config.get("lambda_act") or 0.01 * beta
    stats = mechanism_stats(report, lambda_act)
    print(stats.to_json())
    if args.heatmap:
        export_rank_heatmap(report, args.heatmap)
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--phase", choices=[ph.value for ph in Phase])
    p.add_argument("--prefill-len", type=int)
    p.add_argument("--layers", help="comma-separated defended layer indices")


def _add_tensor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True)
    p.add_argument("--probabilities", action="store_true", help="input holds probabilities, not logits")
    p.add_argument("--causal", action="store_true", help="treat input as causal regardless of sidecar")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tigs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("screen", help="write a screening report")
    _add_tensor_flags(p)
    _add_config_flags(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("smooth", help="apply the defense and write the defended tensor")
    _add_tensor_flags(p)
    _add_config_flags(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.add_argument("--timing")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("synth", help="generate a synthetic trigger suite")
    p.add_argument("--output", required=True, help="output prefix")
    p.add_argument("--delta", type=float, default=8.0)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--triggered", type=int, default=1)
    p.add_argument("--n-layers", type=int, default=1)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--trigger-index", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--sink", action="store_true")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--distributed", action="store_true", help="split --delta over the triggered heads")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check tensor invariants")
    _add_tensor_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="time defended vs undefended toy forward passes")
    _add_config_flags(p)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-head", type=int, default=8)
    p.add_argument("--output", help="CSV of raw samples")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarize a screening report")
    p.add_argument("--input", required=True)
    p.add_argument("--lambda-act", type=float)
    p.add_argument("--heatmap", help="write layer,head,tail_risk,rank CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def _run(func: Callable[[argparse.Namespace], int], args: argparse.Namespace) -> int:
    try:
        return func(args)
    except UsageError as exc:
        print(f"tigs: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"tigs: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ShapeError as exc:
        print(f"tigs: shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except OSError as exc:
        print(f"tigs: io error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"tigs: value error: {exc}", file=sys.stderr)
        return EXIT_VALUE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tigs: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    np.seterr(over="ignore", under="ignore")
    return _run(args.func, args)


if __name__ == "__main__":
    sys.exit(main())
