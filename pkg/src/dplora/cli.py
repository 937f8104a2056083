"""Command-line entry point: ``dplora {train,calibrate,account,overhead,selftest}``.

Exit codes: 0 success, 2 configuration error, 3 accountant inapplicable,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from .config import FIELDS, TrainConfig, flag_name, parse_config, to_ini
from .errors import AccountantInapplicable, ConfigError, ParameterError
from .ledger import LLAMA_7B_TOTAL, overhead_summary, rank_sweep_audit

EXIT_OK, EXIT_CONFIG, EXIT_REGIME, EXIT_RUNTIME = 0, 2, 3, 4
OUT_DIR_ENV = "DPLORA_OUT_DIR"

log = logging.getLogger("dplora")


def _add_config_flags(parser: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    parser.add_argument("--config", type=Path, help="INI config file")
    for key, f in FIELDS.items():
        if key in skip:
            continue
        kind = f.metadata["kind"]
        if kind is bool:
            parser.add_argument(flag_name(key), dest=key, nargs="?", const="true", default=None)
        else:
            parser.add_argument(flag_name(key), dest=key, default=None, metavar=key.upper())


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides = {key: getattr(args, key) for key in FIELDS if hasattr(args, key)}
    return parse_config(args.config, overrides)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _rho_bar_for(cfg: TrainConfig, override: float | None) -> float:
    from .privacy import rho_bar

    if override is not None:
        return override
    if cfg.weights is not None:
        return rho_bar(cfg.weights)
    return 1.0 / math.sqrt(cfg.nodes)


def _q_for(cfg: TrainConfig, override: float | None) -> float:
    # even split: the smallest shard has floor(N / K) samples
    return override if override is not None else cfg.batch / (cfg.n_samples // cfg.nodes)


def cmd_train(args: argparse.Namespace) -> int:
    from .federation import run_federated, run_fedavg_baseline
    from .lora import save_checkpoint
    from .metrics import summary_row, write_jsonl, write_summary_csv

    cfg = _config_from_args(args)
    out = Path(cfg.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))
    if cfg.baseline:
        result, mode = run_fedavg_baseline(cfg), "fedavg"
    else:
        result, mode = run_federated(cfg), "dp-lora"
    for w in result.warnings:
        log.warning(w)
    write_jsonl(out / "metrics.jsonl", result.records)
    write_summary_csv(out / "summary.csv", [summary_row(result, cfg, mode)])
    save_checkpoint(out / "checkpoint.bin", result.model, cfg.seed)
    last = result.records[-1]
    log.info("%s finished: acc=%.4f loss=%.4f eps=%s -> %s", mode, last.acc, last.loss, last.eps_spent, out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    from .privacy import (
        DOMINANT_TERM_NOTE,
        PrivacyParams,
        moments_epsilon,
        moments_regime_reason,
        sigma_calibrate_formula,
        sigma_calibrate_numeric,
    )

    if args.mode is not None:
        args.calibration = args.mode
    cfg = _config_from_args(args)
    if cfg.epsilon is None:
        raise ConfigError("epsilon", "calibrate needs a target epsilon")
    q, rb = _q_for(cfg, args.q), _rho_bar_for(cfg, args.rho_bar)
    t = cfg.rounds * cfg.local_steps
    p = PrivacyParams(cfg.delta, q, t, epsilon=cfg.epsilon, clip_c=cfg.clip, rho_bar=rb, c2=cfg.c2, c1=cfg.c1)
    warnings = p.precondition_warnings()
    if cfg.calibration == "numeric":
        sigma = sigma_calibrate_numeric(cfg.epsilon, cfg.delta, q, t, rb)
        accountant = "moments"
    else:
        sigma = sigma_calibrate_formula(p, cfg.calibration)
        accountant = f"formula-{cfg.calibration}"
        warnings.append(f"closed form with c2={cfg.c2:g}; the constant is not pinned down, prefer --mode numeric")
    reason = moments_regime_reason(q, sigma, rb)
    lambda_star = None
    if reason is None:
        spent = moments_epsilon(PrivacyParams(cfg.delta, q, t, sigma=sigma, rho_bar=rb, c1=cfg.c1))
        lambda_star = spent.lambda_star
        warnings.append(DOMINANT_TERM_NOTE)
    else:
        warnings.append(f"moments regime invalid at this sigma: {reason}")
    _emit(
        {
            "epsilon": cfg.epsilon,
            "delta": cfg.delta,
            "sigma": sigma,
            "lambda_star": lambda_star,
            "accountant": accountant,
            "regime_valid": reason is None,
            "warnings": warnings,
            "q": q,
            "t": t,
            "rho_bar": rb,
        }
    )
    return EXIT_OK


def cmd_account(args: argparse.Namespace) -> int:
    from .privacy import PrivacyParams, moments_epsilon, moments_regime_reason, sequential_epsilon

    cfg = _config_from_args(args)
    if cfg.sigma is None:
        raise ConfigError("sigma", "account needs --sigma")
    q, rb = _q_for(cfg, args.q), _rho_bar_for(cfg, args.rho_bar)
    t = cfg.rounds * cfg.local_steps
    records = []
    reason = moments_regime_reason(q, cfg.sigma, rb)
    if reason is None:
        spent = moments_epsilon(PrivacyParams(cfg.delta, q, t, sigma=cfg.sigma, rho_bar=rb, c1=cfg.c1))
        records.append(
            {
                "epsilon": spent.epsilon,
                "delta": spent.delta,
                "sigma": cfg.sigma,
                "lambda_star": spent.lambda_star,
                "accountant": "moments",
                "regime_valid": True,
                "warnings": list(spent.warnings),
            }
        )
    else:
        records.append(
            {
                "epsilon": None,
                "delta": cfg.delta,
                "sigma": cfg.sigma,
                "lambda_star": None,
                "accountant": "moments",
                "regime_valid": False,
                "warnings": [reason],
            }
        )
    if cfg.sigma > 0:
        seq = sequential_epsilon(cfg.sigma, cfg.delta, t)
        seq_eps, seq_warn = seq.epsilon, ["per-step epsilon from the single-step Gaussian bound, delta split evenly"]
    else:
        seq_eps, seq_warn = None, ["sigma = 0: no finite guarantee"]
    records.append(
        {
            "epsilon": seq_eps,
            "delta": cfg.delta,
            "sigma": cfg.sigma,
            "lambda_star": None,
            "accountant": "sequential",
            "regime_valid": True,
            "warnings": seq_warn,
        }
    )
    _emit(records)
    return EXIT_OK if reason is None else EXIT_REGIME


def _overhead_table(summary: dict) -> str:
    rep = summary["report"]
    rows = [
        ("attention params per block", summary["attention_per_block"]),
        ("attention params, all layers", summary["attention_total"]),
        ("dense params per matrix", summary["dense_per_matrix"]),
        ("LoRA params per matrix", summary["lora_per_matrix"]),
        ("per round per node (L*r*2n)", rep["per_round_per_node"]),
        ("total T*K*L*r*2n", rep["total"]),
        ("worked example without L", summary["worked_example_without_L"]),
        ("baseline total", rep["baseline_total"]),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value:>20,}" for name, value in rows]
    lines.append(f"{'ratio total/baseline':<{width}}  {rep['reduction_ratio']:>20.6%}")
    return "\n".join(lines)


def cmd_overhead(args: argparse.Namespace) -> int:
    summary = overhead_summary(
        args.layers, args.width, args.rank, args.nodes, args.rounds, args.proj, args.dense_total, args.bytes_per_param
    )
    if args.audit:
        summary["rank_sweep_audit"] = rank_sweep_audit()
    _emit(summary)
    if args.table:
        print(_overhead_table(summary), file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run DP-LoRA (or --baseline FedAvg) and write metrics")
    _add_config_flags(train)
    train.set_defaults(func=cmd_train)

    cal = sub.add_parser("calibrate", help="noise multiplier for a target (epsilon, delta)")
    _add_config_flags(cal)
    cal.add_argument("--mode", choices=("theorem", "proof", "numeric"), default=None)
    cal.add_argument("--q", type=float, default=None, help="sampling probability (default batch / shard size)")
    cal.add_argument("--rho-bar", dest="rho_bar", type=float, default=None)
    cal.set_defaults(func=cmd_calibrate)

    acc = sub.add_parser("account", help="epsilon spent under both accountants")
    _add_config_flags(acc)
    acc.add_argument("--q", type=float, default=None)
    acc.add_argument("--rho-bar", dest="rho_bar", type=float, default=None)
    acc.set_defaults(func=cmd_account)

    ov = sub.add_parser("overhead", help="communication-overhead arithmetic")
    ov.add_argument("--layers", type=int, default=32)
    ov.add_argument("--width", type=int, default=4096)
    ov.add_argument("--rank", type=int, default=256)
    ov.add_argument("--nodes", type=int, default=5)
    ov.add_argument("--rounds", type=int, default=50)
    ov.add_argument("--proj", type=int, default=3)
    ov.add_argument("--dense-total", dest="dense_total", type=int, default=LLAMA_7B_TOTAL)
    ov.add_argument("--bytes-per-param", dest="bytes_per_param", type=int, default=4)
    ov.add_argument("--table", action="store_true", help="also print a table on stderr")
    ov.add_argument("--audit", action="store_true", help="include the rank-sweep table audit")
    ov.set_defaults(func=cmd_overhead)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AccountantInapplicable as exc:
        print(f"accountant inapplicable: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except Exception as exc:  # noqa: BLE001 - map every other failure to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
