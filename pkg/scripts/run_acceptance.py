#!/usr/bin/env python3
"""Seed sweep checking that box-domain pre-training helps fine-tuning.

For every seed and flavor the script runs the whole pipeline in-process,
fine-tunes paired arms on each requested data fraction and counts the
seeds where the pre-trained arm wins on AP50, on box embedding purity and
on loss at a quarter of the fine-tune budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import click

from boxpretrain.config import ConfigError, RunConfig, apply_overrides, load_config
from boxpretrain.data import generate_dataset
from boxpretrain.plugins import resolve_flavor
from boxpretrain.proposals import generate_proposals
from boxpretrain.services.finetune import (
    PRETRAINED_ARM,
    RANDOM_ARM,
    evaluate_runs,
    run_paired_finetune,
)
from boxpretrain.services.pretrain import (
    backbone_manifest,
    image_domain_pretrain,
    run_box_pretrain,
)
from boxpretrain.services.report import CONVERGENCE_FRACTION

FLAVORS = ("anchor", "point", "query")
FRACTIONS = (0.1, 1.0)
REQUIRED_WINS = 4

logger = logging.getLogger("run_acceptance")


class AcceptanceError(RuntimeError):
    """Raised when the sweep cannot run."""


@dataclass(slots=True)
class Tally:
    """Per-seed paired differences (pre-trained minus random) for one check."""

    deltas: list[float] = field(default_factory=list)

    def add(self, delta: float) -> None:
        self.deltas.append(delta)

    @property
    def wins(self) -> int:
        return sum(1 for delta in self.deltas if delta > 0)

    @property
    def mean(self) -> float:
        return sum(self.deltas) / len(self.deltas) if self.deltas else 0.0

    def passed(self, required: int) -> bool:
        return self.wins >= min(required, len(self.deltas)) and self.mean > 0

    def as_dict(self) -> dict[str, Any]:
        return {"deltas": self.deltas, "wins": self.wins, "mean": self.mean}


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=None, help="Base TOML config.")
    parser.add_argument("--workdir", type=Path, default=Path("acceptance"))
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--flavors", nargs="+", default=list(FLAVORS))
    parser.add_argument("--fractions", nargs="+", type=float, default=list(FRACTIONS))
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser.parse_args()


def seed_config(base: RunConfig, seed: int, flavor: str) -> RunConfig:
    return apply_overrides(
        load_config(base.source_path), {"seed": seed, "flavor": flavor}
    )


def run_seed(
    base: RunConfig,
    seed: int,
    flavors: list[str],
    fractions: list[float],
    workdir: Path,
    tallies: dict[str, Tally],
) -> None:
    root = workdir / f"seed-{seed}"
    config = seed_config(base, seed, flavors[0])
    data = config.data
    train = generate_dataset(
        root / "data" / "train", data, count=data.train_images, seed=seed
    )
    held_out = generate_dataset(
        root / "data" / "eval", data, count=data.eval_images, seed=seed, split=1
    )
    proposals = {
        record.id: generate_proposals(
            train.load_image(record), config.proposals, image_id=record.id
        )
        for record in train.images
    }
    backbone = backbone_manifest(image_domain_pretrain(train, config), config)

    for flavor_id in flavors:
        config = seed_config(base, seed, flavor_id)
        flavor = resolve_flavor(config)
        pretrained = run_box_pretrain(
            train,
            proposals,
            config,
            flavor=flavor,
            backbone=backbone,
            out_dir=root / flavor_id / "box",
        )
        for fraction in fractions:
            apply_overrides(config, {"finetune.fraction": fraction})
            runs_dir = root / flavor_id / f"runs-{fraction:g}"
            arms = run_paired_finetune(
                train, config, runs_dir, flavor=flavor, pretrained=pretrained
            )
            results = evaluate_runs(
                runs_dir, held_out, config, flavor=flavor, pretrained=pretrained
            )
            for fold_name, reports in results.items():
                tallies[f"ap50/{flavor_id}/{fraction:g}"].add(
                    reports[PRETRAINED_ARM].ap50 - reports[RANDOM_ARM].ap50
                )
                logger.info("seed %d %s %s evaluated", seed, flavor_id, fold_name)
            quarter = {
                run.arm: run.result.loss_at(CONVERGENCE_FRACTION) for run in arms
            }
            # lower loss is better, so the sign is flipped
            tallies[f"convergence/{flavor_id}/{fraction:g}"].add(
                quarter[RANDOM_ARM] - quarter[PRETRAINED_ARM]
            )
            purity = json.loads((runs_dir / "purity.json").read_text())
        tallies[f"purity/{flavor_id}"].add(
            purity[PRETRAINED_ARM] - purity[RANDOM_ARM]
        )


def main() -> None:
    args = parse_args()
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    unknown = sorted(set(args.flavors) - set(FLAVORS))
    if unknown:
        raise AcceptanceError(f"unknown flavors: {', '.join(unknown)}")

    base = load_config(args.config)
    tallies: dict[str, Tally] = {}
    for flavor_id in args.flavors:
        tallies[f"purity/{flavor_id}"] = Tally()
        for fraction in args.fractions:
            tallies[f"ap50/{flavor_id}/{fraction:g}"] = Tally()
            tallies[f"convergence/{flavor_id}/{fraction:g}"] = Tally()

    with click.progressbar(range(args.seeds), label="Seeds") as seeds:
        for seed in seeds:
            run_seed(base, seed, args.flavors, args.fractions, args.workdir, tallies)

    required = min(REQUIRED_WINS, args.seeds)
    failed = []
    for name, tally in sorted(tallies.items()):
        status = "ok" if tally.passed(required) else "FAIL"
        wins = f"{tally.wins}/{len(tally.deltas)}"
        print(f"{name:<28} wins {wins}  mean {tally.mean:+.4f}  {status}")
        if status != "ok":
            failed.append(name)

    args.workdir.mkdir(parents=True, exist_ok=True)
    summary = {name: tally.as_dict() for name, tally in tallies.items()}
    (args.workdir / "acceptance.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if failed:
        raise AcceptanceError(f"{len(failed)} directional checks failed")


if __name__ == "__main__":
    try:
        main()
    except (AcceptanceError, ConfigError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(1)
