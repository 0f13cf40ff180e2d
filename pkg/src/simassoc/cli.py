"""Command-line entry point: ``simassoc <gen|train|track|eval|inspect|ablate>``.

Exit codes: 0 success, 1 usage error, 2 bad configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import experiment as ex
from .assoc import track_sequence
from .geometry import ConfigError
from .io import (RunConfig, load_config, load_sequence, read_mot, save_sequence, sequence_dirs,
                 track_table, write_mot)
from .metrics import evaluate_many
from .train import LOG_COLUMNS, clip_loss, format_log_row, load_checkpoint, sample_clip, save_checkpoint

log = logging.getLogger("simassoc")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simassoc", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run config (default: $SIMASSOC_CONFIG or built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable, applied after --config")
    p.add_argument("--seed", type=int, help="seed for data generation and training")
    p.add_argument("--dump-defaults", action="store_true", help="print the full default config and exit")
    p.add_argument("--acceptance", action="store_true", help="start from the acceptance config instead of the defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval", "stress"), default="train")

    t = sub.add_parser("train", help="fit a model; writes model.ckpt and loss.csv")
    t.add_argument("--data", help="dataset directory (default: generate the training split)")
    t.add_argument("--out", required=True)

    k = sub.add_parser("track", help="run the tracker over a dataset")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score predicted tracks against ground truth")
    e.add_argument("--pred", required=True, help="directory of seq_*.txt files or a single MOT file")
    e.add_argument("--gt", required=True, help="dataset directory or a single MOT file")
    e.add_argument("--csv", help="also write the report as CSV")

    i = sub.add_parser("inspect", help="dump similarity matrices of one clip as CSV and PGM")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True, help="one sequence directory")
    i.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and score every loss combination of the ablation grid")
    a.add_argument("--out", help="write ablation.csv here")
    a.add_argument("--only", action="append", choices=[n for n, _ in ex.ABLATION_GRID],
                   help="restrict to these rows; repeatable")
    return p


def resolve_config(args) -> RunConfig:
    cfg = ex.acceptance_config() if args.acceptance else load_config(args.config)
    if args.acceptance and args.config:
        raise ConfigError("--acceptance and --config are mutually exclusive")
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = cfg.override(key.strip(), raw)
    if args.seed is not None:
        cfg.data = replace(cfg.data, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg.validate()


def _load_dataset(path) -> list:
    dirs = sequence_dirs(path)
    if not dirs:
        raise FileNotFoundError(f"no seq_* directories under {path}")
    return [load_sequence(d) for d in dirs]


def cmd_gen(cfg: RunConfig, args) -> int:
    if args.split == "train":
        seqs = ex.train_sequences(cfg)
    else:
        seqs = ex.eval_sequences(cfg, ex.STRESS_DECIMATION if args.split == "stress" else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, seq in enumerate(seqs):
        save_sequence(seq, out / f"seq_{k:04d}", tuple(cfg.data.frame_size))
    (out / "run.yaml").write_text(cfg.dump())
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    seqs = _load_dataset(args.data) if args.data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")

        def on_step(row):
            fh.write(format_log_row(row) + "\n")
            if row["step"] % 100 == 0:
                log.info("step %d epoch %d total %.4f", row["step"], row["epoch"], row["total"])

        model, _ = ex.train_model(cfg, seqs, on_step=on_step)
    save_checkpoint(model, None, out / "model.ckpt")
    (out / "run.yaml").write_text(cfg.dump())
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_track(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = sequence_dirs(args.data)
    if not dirs:
        raise FileNotFoundError(f"no seq_* directories under {args.data}")
    size = tuple(cfg.data.frame_size)
    for d in dirs:
        rows = track_sequence(model, load_sequence(d).frames(), cfg.match)
        write_mot(out / f"{d.name}.txt", track_table([(r.frame, r.id, r.box, r.score) for r in rows], size))
    print(f"tracked {len(dirs)} sequences into {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_file():
        pairs = {pred.stem: (read_mot(pred).track_rows(), read_mot(gt).track_rows())}
    else:
        pairs = {}
        for d in sequence_dirs(gt):
            f = pred / f"{d.name}.txt"
            if not f.exists():
                raise FileNotFoundError(f"missing prediction {f}")
            pairs[d.name] = (read_mot(f).track_rows(), read_mot(d / "gt.txt").track_rows())
        if not pairs:
            raise FileNotFoundError(f"no seq_* directories under {gt}")
    report = evaluate_many(pairs)
    print(report.format())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def write_pgm(path, S: np.ndarray, cell: int = 8) -> None:
    """8-bit binary PGM; similarities in [0, 1] map linearly onto 0..255."""
    img = np.rint(np.clip(np.asarray(S, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8)) if img.size else img.reshape(0, 0)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def _write_matrix(out: Path, stem: str, S: np.ndarray) -> None:
    np.savetxt(out / f"{stem}.csv", S, delimiter=",", fmt="%.6f")
    write_pgm(out / f"{stem}.pgm", S)


def cmd_inspect(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    seq = load_sequence(args.data)
    tcfg = replace(cfg.train, rotate_features=False)
    clip = sample_clip(seq, tcfg, np.random.default_rng(cfg.train.seed))
    with torch.no_grad():
        _, extras = clip_loss(model, clip, cfg.loss, tcfg, cfg.match, keep_matrices=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, (pair, _) in enumerate(extras["spatial"]):
        _write_matrix(out, f"spatial_{k}", pair.S.numpy())
    for k, (pair, _) in enumerate(extras["temporal"]):
        _write_matrix(out, f"temporal_{k}", pair.S.numpy())
    if "crossclip" in extras:
        pair, _ = extras["crossclip"]
        order = np.argsort(np.asarray(extras["buffer_ids"]), kind="stable")
        _write_matrix(out, "crossclip", pair.S.numpy()[np.ix_(order, order)])
        np.savetxt(out / "crossclip_ids.csv", np.asarray(extras["buffer_ids"])[order], fmt="%d")
    print(f"clip frames {clip.indices}; matrices in {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    grid = [g for g in ex.ABLATION_GRID if not args.only or g[0] in args.only]
    rows = ex.run_ablation(cfg, grid, on_row=lambda r: log.info("%s idf1 %.4f", r["losses"], r["idf1"]))
    print(ex.format_ablation(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["losses,idf1,mota,id_switches,margin"]
        lines += [f"{r['losses']},{r['idf1']:.6f},{r['mota']:.6f},{r['id_switches']},{r['margin']:.6f}" for r in rows]
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "inspect": cmd_inspect, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.dump_defaults:
            print(cfg.dump(), end="")
            return EXIT_OK
        if not args.command:
            print("simassoc: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        # one thread keeps reductions, and therefore outputs, identical across machines
        torch.set_num_threads(1)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
