"""``flower`` command line: gen-data, train, eval, mi-check, grad-check.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical abort,
5 checkpoint error, 6 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .checks import gradient_suite, mi_suite
from .config import RunConfig, derived_seed, load_config
from .encoder import EmbeddingRecord, write_embedding_dump
from .errors import CheckpointError, DatasetParseError, NumericalError, ValidationError
from .evaluation import build_trials, compute_eer, det_points, evaluate_records, report_line, score_trials, write_scores, write_trials
from .synthdata import Utterance, label_counts, load_dataset, sample_dataset, stack, write_dataset
from .trainer import EpochMetrics, ModelState, train

log = logging.getLogger("flower")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_CHECK = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def split_dataset(utts: Sequence[Utterance], valid_fraction: float, test_fraction: float) -> dict[str, list[Utterance]]:
    """Contiguous train | valid | test split by file order (samples are i.i.d.)."""
    n = len(utts)
    n_test = int(round(n * test_fraction))
    n_valid = int(round(n * valid_fraction))
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise ValidationError(f"dataset of {n} utterances leaves no training split")
    utts = list(utts)
    return {
        "train": utts[:n_train],
        "valid": utts[n_train : n_train + n_valid],
        "test": utts[n_train + n_valid :],
        "all": utts,
    }


def embed_records(state: ModelState, utts: Sequence[Utterance]) -> list[EmbeddingRecord]:
    x, _, _ = stack(utts)
    omegas = state.embed(torch.as_tensor(x, dtype=torch.float64)).numpy()
    return [EmbeddingRecord(u.id, u.y, u.n, w) for u, w in zip(utts, omegas)]


def trial_eer(records: Sequence[EmbeddingRecord], pairs_per_class: int, seed: int) -> float:
    trials = score_trials(build_trials(records, pairs_per_class, seed), records)
    return compute_eer([t.score for t in trials], [t.is_target for t in trials])


# --- helpers -----------------------------------------------------------------------


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from None
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_data(path: Path):
    if not path.is_file():
        raise CliError(EXIT_IO, f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except DatasetParseError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from None


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {path}: {exc}") from None
    if not path.is_dir():
        raise CliError(EXIT_IO, f"output path {path} is not a directory")
    return path


def _load_state(path: Path, header) -> tuple[ModelState, dict]:
    if not path.is_file():
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}")
    try:
        state = load_checkpoint(path)
        meta, _ = read_header(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint error: {exc}") from None
    if (state.frames, state.feat_dim) != (header.T, header.F):
        raise CliError(
            EXIT_CHECKPOINT,
            f"checkpoint expects T={state.frames}, F={state.feat_dim} but the dataset has T={header.T}, F={header.F}",
        )
    if state.loss_kind == "aam" and state.num_classes != header.C:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint has {state.num_classes} classes but the dataset has {header.C}")
    return state, meta.get("extra", {})


def _print_checks(results) -> int:
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# --- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.dataset)
    spec = cfg.generator_spec()
    utts = sample_dataset(spec, cfg.data.count)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(out, utts, spec)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    counts = label_counts(utts)
    print(f"wrote {len(utts)} utterances to {out}")
    print("y counts: " + " ".join(f"{k}:{v}" for k, v in sorted(counts["y"].items())))
    print("n counts: " + " ".join(f"{k}:{v}" for k, v in sorted(counts["n"].items())))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    header, utts = _load_data(Path(cfg.paths.dataset))
    out = _out_dir(Path(args.out or cfg.paths.out_dir))
    try:
        splits = split_dataset(utts, cfg.eval.valid_fraction, cfg.eval.test_fraction)
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    tcfg = cfg.train_config()
    state, extra = None, {}
    if args.checkpoint:
        state, extra = _load_state(Path(args.checkpoint), header)
    start_epoch = state.epoch if state is not None else 0
    best = extra.get("best_valid_eer")

    metrics_path, timing_path, valid_path = out / "metrics.jsonl", out / "timing.jsonl", out / "valid.jsonl"
    # keep only the epochs a resumed state has already completed
    for p in (metrics_path, timing_path, valid_path):
        kept = []
        if start_epoch and p.exists():
            kept = [l for l in p.read_text().splitlines() if json.loads(l)["epoch"] < start_epoch]
        p.write_text("".join(l + "\n" for l in kept))

    trials_seed = derived_seed(cfg.seed, "trials")
    valid = splits["valid"]

    def on_epoch(st: ModelState, m: EpochMetrics) -> None:
        nonlocal best
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(m.to_record(), sort_keys=True) + "\n")
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": m.epoch, "wall_time": m.wall_time}) + "\n")
        last = st.epoch == tcfg.epochs
        if valid and ((m.epoch + 1) % cfg.eval.valid_every == 0 or last):
            eer = trial_eer(embed_records(st, valid), cfg.eval.pairs_per_class, trials_seed)
            with open(valid_path, "a") as fh:
                fh.write(json.dumps({"epoch": m.epoch, "valid_eer": eer}) + "\n")
            if best is None or eer < best:
                best = eer
                save_checkpoint(st, out / "best.ckpt", {"valid_eer": eer, "best_valid_eer": eer})
        save_checkpoint(st, out / "final.ckpt", {"best_valid_eer": best})
        print(
            f"epoch {m.epoch} {m.phase} L_xent={m.L_xent:.5f} L_red="
            + ("-" if m.L_redundancy is None else f"{m.L_redundancy:.5f}")
            + f" L_IB={m.L_IB:.5f}",
            flush=True,
        )

    try:
        state, _ = train(splits["train"], tcfg, cfg.model, state=state, on_epoch=on_epoch)
    except NumericalError as exc:
        where = " ".join(f"{k}={v}" for k, v in exc.where.items())
        raise CliError(EXIT_NUMERIC, f"numerical abort: {exc} [{where}]") from None
    except ValidationError as exc:
        # state/data mismatch on resume is a checkpoint problem; anything else is config
        code = EXIT_CHECKPOINT if args.checkpoint else EXIT_CONFIG
        raise CliError(code, f"{exc}") from None
    if not valid:
        save_checkpoint(state, out / "best.ckpt", {"best_valid_eer": None})
    print(f"finished {state.epoch} epochs; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    header, utts = _load_data(Path(cfg.paths.dataset))
    out = _out_dir(Path(args.out or cfg.paths.out_dir))
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.paths.out_dir) / "final.ckpt"
    state, _ = _load_state(ckpt, header)
    try:
        part = split_dataset(utts, cfg.eval.valid_fraction, cfg.eval.test_fraction)[cfg.eval.split]
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    records = embed_records(state, part)
    report, trials = evaluate_records(records, cfg.eval.pairs_per_class, derived_seed(cfg.seed, "trials"), cfg.eval.probe_heldout)
    thr, far, frr = det_points([t.score for t in trials], [t.is_target for t in trials])
    try:
        write_embedding_dump(out / "embeddings.jsonl", records)
        write_trials(out / "trials.txt", trials)
        write_scores(out / "scores.txt", trials)
        with open(out / "det.txt", "w") as fh:
            for a, b, c in zip(thr, far, frr):
                fh.write(f"{a!r} {b!r} {c!r}\n")
        (out / "report.json").write_text(report_line(report) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write evaluation outputs: {exc}") from None
    print(report_line(report))
    return EXIT_OK


def cmd_mi_check(args) -> int:
    cfg = _config(args)
    m = cfg.mi_check
    return _print_checks(mi_suite(m.rhos, m.batch, m.mode, derived_seed(cfg.seed, "mi_check"), m.dims))


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    g = cfg.grad_check
    if args.corrupt:
        g = replace(g, corrupt=True)
    if g.corrupt:
        print("self-test: one analytic gradient coordinate is doubled per case; every check should fail")
    return _print_checks(gradient_suite(g.instances, g.tol, g.eps, g.max_coords, g.corrupt))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flower", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "generate a synthetic dataset"),
        "train": (cmd_train, "train embedding network and flow"),
        "eval": (cmd_eval, "score trials and probe a checkpoint"),
        "mi-check": (cmd_mi_check, "verify the MI estimator on Gaussian oracles"),
        "grad-check": (cmd_grad_check, "finite-difference gradient verification"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", help="output file (gen-data) or directory (train, eval)")
        p.add_argument("--checkpoint", help="checkpoint to resume from (train) or evaluate (eval)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "grad-check":
            p.add_argument("--corrupt", action="store_true", help="detector self-test; expected to fail")
        p.set_defaults(func=fn)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
