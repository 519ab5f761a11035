"""Command line: calibrate, decode, compare, trace-dump, report.

Exit codes: 0 success, 2 configuration error, 3 input or parse error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..budgeting import (BudgetConfig, calibrate, calibrate_model, format_profile, load_profile,
                         save_profile)
from ..cache import CacheConfig
from ..decoding import POLICIES, EvictionConfig, decode
from ..errors import ConfigurationError, MaskKVError, ParseError
from ..model import RemaskPolicy, init_model
from ..scoring import SEGMENTS
from .compare import CompareConfig, build_profile, run_compare, task_for
from .report import format_sections, parse_report, pretty
from .tasks import NEEDLE_MODEL, needle_hit
from .trace import load_trace, save_trace, scores_from_trace, trace_from_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3

log = logging.getLogger("maskkv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("budget and cache")
    g.add_argument("--alpha", type=float, default=0.1, help="head split: 1 is uniform")
    g.add_argument("--beta", type=float, default=0.4, help="layer split: 1 is uniform")
    g.add_argument("--boundary-layers", type=_int_list, default=None, metavar="L,L",
                   help="boundary layer set (default first and last)")
    g.add_argument("--tp", type=int, default=50, help="prompt refresh interval")
    g.add_argument("--tr", type=int, default=5, help="response refresh interval")
    g.add_argument("--delta", type=float, default=0.5, help="value-shift cosine threshold")
    g.add_argument("--block-len", type=int, default=8)
    g.add_argument("--transfer-ratio", type=float, default=0.25)
    g.add_argument("--mask-segment", choices=SEGMENTS, default="all")
    g.add_argument("--profile", default=None, help="calibration profile file")
    g.add_argument("--seed", type=int, default=0, help="first task seed")
    g.add_argument("--model-seed", type=int, default=NEEDLE_MODEL.seed)
    g.add_argument("--prompt-len", type=int, default=64)
    g.add_argument("--gen-len", type=int, default=8)
    g.add_argument("--needle-depth", type=float, default=None, help="default: drawn per seed")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="maskkv", description="Mask-query KV eviction for a toy diffusion LM.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", parents=[common], help="write a calibration profile")
    p.add_argument("--samples", type=int, default=8, help="seeded prompts (ignored with --trace)")
    p.add_argument("--trace", action="append", default=[], help="calibrate from trace file(s)")
    p.add_argument("-o", "--output", default="-")

    p = sub.add_parser("decode", parents=[common], help="decode one needle prompt")
    p.add_argument("--policy", choices=("full",) + POLICIES, default="full")
    p.add_argument("--budget", type=int, default=None, help="per-head prompt budget per layer")

    p = sub.add_parser("compare", parents=[common], help="policy x budget sweep")
    p.add_argument("--policy", type=lambda s: tuple(x for x in s.split(",") if x),
                   default=POLICIES, help="comma-separated policies")
    p.add_argument("--budget", type=_int_list, default=(2, 4, 8, 16), help="comma-separated budgets")
    p.add_argument("--seeds", type=int, default=50, help="number of task seeds")
    p.add_argument("--samples", type=int, default=8, help="calibration prompts")
    p.add_argument("--online", action="store_true", help="score maskkv budgets per sample")
    p.add_argument("-o", "--output", default="-")

    p = sub.add_parser("trace-dump", parents=[common], help="write a trace of the first step")
    p.add_argument("--source", default="toy-model")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("report", help="pretty-print a report file")
    p.add_argument("path")
    p.add_argument("--tokens", action="store_true", help="include per-seed tokens")
    return parser


def _model(args):
    return replace(NEEDLE_MODEL, seed=args.model_seed)


def _cache(args) -> CacheConfig:
    return CacheConfig(prompt_interval=args.tp, response_interval=args.tr, shift_threshold=args.delta)


def _remask(args) -> RemaskPolicy:
    return RemaskPolicy(transfer_ratio=args.transfer_ratio, block_length=args.block_len)


def _check(args, model) -> None:
    model.validate()
    BudgetConfig(0, args.alpha, args.beta, args.boundary_layers).validate(model.num_layers)
    _cache(args).validate(model.num_layers)
    _remask(args).validate()
    if args.prompt_len < 1 or args.gen_len < 1:
        raise ConfigurationError("--prompt-len and --gen-len must be >= 1")


def _profile(args, model):
    if args.profile is None:
        return None
    prof = load_profile(args.profile)
    if prof.num_layers != model.num_layers or prof.num_heads != model.num_heads:
        raise ConfigurationError(f"profile is D={prof.num_layers} H={prof.num_heads}, model is "
                                 f"D={model.num_layers} H={model.num_heads}")
    return prof


def _compare_config(args, model, seeds) -> CompareConfig:
    return CompareConfig(
        model=model, seeds=seeds, prompt_len=args.prompt_len, gen_len=args.gen_len,
        needle_depth=args.needle_depth, alpha=args.alpha, beta=args.beta,
        boundary=args.boundary_layers, mask_segment=args.mask_segment, cache=_cache(args),
        remask=_remask(args), profile=_profile(args, model),
        **({"policies": args.policy, "budgets": args.budget, "calibration_samples": args.samples,
            "online": args.online} if args.command == "compare" else {}))


def _write(text: str, path: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_calibrate(args) -> None:
    model = _model(args)
    _check(args, model)
    if args.trace:
        samples = [scores_from_trace(load_trace(p), args.mask_segment) for p in args.trace]
        prof = calibrate(samples, source=",".join(args.trace))
    else:
        if args.samples < 1:
            raise ConfigurationError("--samples must be >= 1")
        cfg = _compare_config(args, model, (args.seed,))
        params = init_model(model)
        prompts = [task_for(cfg, args.seed + i).prompt for i in range(args.samples)]
        prof = calibrate_model(params, prompts, args.gen_len, args.mask_segment)
    if args.output == "-":
        sys.stdout.write(format_profile(prof))
    else:
        save_profile(prof, args.output)


def cmd_decode(args) -> None:
    model = _model(args)
    _check(args, model)
    cfg = _compare_config(args, model, (args.seed,))
    params = init_model(model)
    task = task_for(cfg, args.seed)
    ev = None
    if args.policy != "full":
        if args.budget is None:
            raise ConfigurationError("--budget is required with an eviction policy")
        profile = cfg.profile
        if profile is None and args.policy in ("maskkv", "squeeze"):
            profile = build_profile(replace(cfg, seeds=(args.seed,)), params)
        ev = EvictionConfig(budget=args.budget, policy=args.policy, alpha=args.alpha, beta=args.beta,
                            boundary=args.boundary_layers, mask_segment=args.mask_segment,
                            profile=profile)
    res = decode(params, task.prompt, args.gen_len, cfg.remask, cfg.cache, ev)
    rows = [("seed", str(args.seed)), ("policy", args.policy),
            ("budget", "full" if ev is None else str(args.budget)),
            ("needle_position", str(task.position)), ("needle_token", str(task.answer)),
            ("needle_hit", str(int(needle_hit(res.response, task.answer)))),
            ("prompt", " ".join(map(str, task.prompt))),
            ("response", " ".join(map(str, res.response))),
            ("steps", str(len(res.steps))),
            ("kv_bytes_total", str(res.final_kv_bytes)),
            ("prompt_kv_bytes_total", str(res.prompt_kv_bytes)),
            ("peak_bytes", str(res.peak_bytes))]
    if res.eviction is not None:
        rows.append(("retained_mass", f"{res.eviction.mean_retained_mass:.6f}"))
        rows.append(("retained_per_layer", " ".join(str(int(c)) for c in res.retained_counts.sum(axis=1))))
    sys.stdout.write(format_sections([("decode", rows)]))


def cmd_compare(args) -> None:
    model = _model(args)
    _check(args, model)
    if args.seeds < 1:
        raise ConfigurationError("--seeds must be >= 1")
    cfg = _compare_config(args, model, tuple(range(args.seed, args.seed + args.seeds)))
    _write(run_compare(cfg).to_text(), args.output)


def cmd_trace_dump(args) -> None:
    model = _model(args)
    _check(args, model)
    cfg = _compare_config(args, model, (args.seed,))
    task = task_for(cfg, args.seed)
    save_trace(trace_from_model(init_model(model), task.prompt, args.gen_len, args.source), args.output)


def cmd_report(args) -> None:
    with open(args.path, encoding="utf-8") as fh:
        text = fh.read()
    sys.stdout.write(pretty(parse_report(text), show_tokens=args.tokens))


COMMANDS = {"calibrate": cmd_calibrate, "decode": cmd_decode, "compare": cmd_compare,
            "trace-dump": cmd_trace_dump, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"maskkv: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError, UnicodeDecodeError) as exc:
        print(f"maskkv: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MaskKVError as exc:
        print(f"maskkv: error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
