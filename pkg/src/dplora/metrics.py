"""Per-round JSON-lines metrics and the CSV run summary."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

from .federation import RoundRecord, RunResult

SUMMARY_FIELDS = (
    "mode",
    "seed",
    "nodes",
    "rounds",
    "layers",
    "width",
    "rank",
    "sigma",
    "q",
    "rho_bar",
    "final_loss",
    "final_acc",
    "eps_spent",
    "delta",
    "accountant",
    "params_up_per_round",
    "total_params_up",
    "total_bytes_up",
    "total_bytes_down",
)


def write_jsonl(path: str | Path, records: Iterable[RoundRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[RoundRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RoundRecord.from_json(line) for line in fh if line.strip()]


def summary_row(result: RunResult, cfg, mode: str) -> dict:
    last = result.records[-1]
    return {
        "mode": mode,
        "seed": cfg.seed,
        "nodes": cfg.nodes,
        "rounds": cfg.rounds,
        "layers": cfg.layers,
        "width": cfg.width,
        "rank": cfg.rank if mode == "dp-lora" else "",
        "sigma": repr(result.sigma),
        "q": repr(result.q),
        "rho_bar": repr(result.rho_bar),
        "final_loss": repr(last.loss),
        "final_acc": repr(last.acc),
        "eps_spent": "" if last.eps_spent is None else repr(last.eps_spent),
        "delta": "" if last.delta is None else repr(last.delta),
        "accountant": last.accountant,
        "params_up_per_round": sum(last.params_up),
        "total_params_up": sum(sum(r.params_up) for r in result.records),
        "total_bytes_up": sum(r.bytes_up for r in result.records),
        "total_bytes_down": sum(r.bytes_down for r in result.records),
    }


def write_summary_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
