"""Command-line entry point: ``splitfedcl run | corrupt | compare``.

Outputs of ``run`` (all CSV floats use Python's shortest round-trip repr):

* ``rounds.csv``: one row per client per round plus a ``global`` row, with
  the columns in ``protocol.REPORT_COLUMNS``.
* ``final.csv``: test metrics of the final global model.
* ``labels_before_after/``: image, clean label, training label and final
  prediction as PGM files for a few corrupted samples per client.
* ``config.toml``: the resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import annsim, data, pgm
from .config import RunConfig, load_config
from .errors import ConfigError, MissingRun, SplitFedError
from .metrics import MetricSet, evaluate
from .nn import forward_split
from .protocol import REPORT_COLUMNS, ClientState, Federation

log = logging.getLogger("splitfedcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
FINAL_COLUMNS = ("label", "mode", "seed", "rounds", "accuracy", "dice_loss", "mean_iou", "precision", "recall")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def build_clients(cfg: RunConfig):
    """Generate the federation and wrap it as protocol client states."""
    clients, test = data.build_federation(cfg.scene(), cfg.layout(), cfg.seed, cfg.difficulty())
    dtype = np.dtype(cfg.train_dtype)
    states = []
    for c in clients:
        labels = [s.clean_label if cfg.clean_labels else s.label for s in c.samples]
        states.append(ClientState(c.client_id, data.network_input([s.image for s in c.samples], dtype),
                                  np.stack(labels), [s.sample_id for s in c.samples], c.corruption_flags))
    test_x = data.network_input([s.image for s in test], dtype)
    test_y = np.stack([s.label for s in test])
    return clients, states, test_x, test_y


def final_row(cfg: RunConfig, metrics: MetricSet) -> dict:
    row = {"label": cfg.run_label, "mode": cfg.mode, "seed": cfg.seed, "rounds": cfg.global_rounds}
    row.update(metrics.as_row())
    return row


def _dump_samples(cfg: RunConfig, clients, fed: Federation, out: Path) -> None:
    target = out / "labels_before_after"
    target.mkdir(parents=True, exist_ok=True)
    for c in clients:
        picked = [s for s in c.samples if s.corrupted][:cfg.dump_samples]
        if not picked:
            continue
        x = data.network_input([s.image for s in picked], np.dtype(cfg.train_dtype))
        pred = forward_split(fed.server.teacher, x)[0].argmax(axis=1)
        for s, p in zip(picked, pred):
            stem = target / f"client{c.client_id}_{s.sample_id:06d}"
            pgm.write_image(f"{stem}_image.pgm", s.image)
            pgm.write_label(f"{stem}_clean.pgm", s.clean_label)
            pgm.write_label(f"{stem}_noisy.pgm", s.label)
            pgm.write_label(f"{stem}_pred.pgm", p)


def run_experiment(cfg: RunConfig, out_dir=None, deterministic: bool = False) -> MetricSet:
    """Train one configuration end to end and write its artefacts."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    clients, states, test_x, test_y = build_clients(cfg)
    fed = Federation(states, cfg.protocol(), cfg.architecture(), test_x, test_y,
                     deterministic=deterministic)
    with (out / "rounds.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for _ in range(cfg.global_rounds):
            report = fed.run_round()
            for row in report.rows():
                writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
            fh.flush()
            g = report.global_row
            log.info("round %d: tau=%.4g miou=%.4f detected=%s", report.round_index, g["tau"], g["test_miou"],
                     " ".join(f"{row['detected_noise_ratio']:.3f}" for row in report.clients))
    metrics = evaluate(fed.server.teacher, test_x, test_y)
    row = final_row(cfg, metrics)
    _write_csv(out / "final.csv", list(row), [row])
    if cfg.dump_samples:
        _dump_samples(cfg, clients, fed, out)
    return metrics


def read_final(run_dir) -> dict:
    path = Path(run_dir) / "final.csv"
    if not path.is_file():
        raise MissingRun(f"{run_dir}: no final.csv (run incomplete or wrong directory)")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise MissingRun(f"{path}: expected exactly one result row")
    row = rows[0]
    for k, v in row.items():
        if k not in ("label", "mode"):
            row[k] = int(v) if k in ("seed", "rounds") else float(v)
    return row


def compare_modes(run_dirs) -> list[dict]:
    """Final metrics of several runs, one row per run in the given order.

    Raises:
        MissingRun: if a directory lacks ``final.csv``.
    """
    return [read_final(d) for d in run_dirs]


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = [c for c in rows[0] if c not in ("rounds",)]
    cells = [[c for c in cols]] + [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols]
                                   for r in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(line, widths)) for line in cells)


# --------------------------------------------------------------------------

def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    env_seed = os.environ.get("SFCL_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.replace(seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"SFCL_SEED must be an integer, got {env_seed!r}") from None
    if args.deterministic:
        cfg = cfg.replace(workers=1)
    metrics = run_experiment(cfg, args.out, deterministic=args.deterministic)
    print(f"{cfg.run_label}: mean_iou={metrics.mean_iou:.4f} accuracy={metrics.accuracy:.4f} "
          f"dice_loss={metrics.dice_loss:.4f}")
    return EXIT_OK


def _parse_classes(text: str | None):
    if text is None:
        return None
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--classes expects comma-separated class ids, got {text!r}") from None


def _cmd_corrupt(args) -> int:
    try:
        params = annsim.DifficultyParams(rho=args.rho, amax_scale=args.amax_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    image = pgm.read_image(args.image)
    label = pgm.read_label(args.label)
    noisy = annsim.deform_multiclass(image, label, params, _parse_classes(args.classes))
    pgm.write_label(args.out, noisy)
    changed = int(np.count_nonzero(noisy != label))
    print(f"wrote {args.out}: {changed} of {label.size} pixels changed")
    return EXIT_OK


def _cmd_compare(args) -> int:
    rows = compare_modes(args.runs)
    print(format_table(rows))
    if args.out:
        _write_csv(Path(args.out), list(rows[0]), rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitfedcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True, help="TOML run configuration")
    run.add_argument("--deterministic", action="store_true", help="train clients sequentially")
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.set_defaults(func=_cmd_run)

    cor = sub.add_parser("corrupt", help="deform an annotation with the difficulty model")
    cor.add_argument("--image", required=True, help="input image (PGM)")
    cor.add_argument("--label", required=True, help="input label map (PGM, grey level = class)")
    cor.add_argument("--out", required=True, help="output label map (PGM)")
    cor.add_argument("--rho", type=float, default=2.0)
    cor.add_argument("--amax-scale", type=float, default=1.0, help="a_max as a multiple of the band width")
    cor.add_argument("--classes", help="comma-separated classes to deform (default: all present)")
    cor.add_argument("--seed", type=int, default=0, help="accepted for uniformity; deformation is deterministic")
    cor.set_defaults(func=_cmd_corrupt)

    cmp_ = sub.add_parser("compare", help="tabulate final metrics of finished runs")
    cmp_.add_argument("--runs", nargs="+", required=True, help="run output directories")
    cmp_.add_argument("--out", help="also write the table as CSV")
    cmp_.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SplitFedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
