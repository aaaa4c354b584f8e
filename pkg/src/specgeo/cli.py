"""Umbrella command-line interface.

One subcommand per toolkit operation; ``--json`` switches the summary
output to machine-readable JSON on stdout.  Exit codes: 0 success, 1
computation error (bad data, divergence, format violations), 2 usage
error (unknown flags, malformed invocations).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (
    ToyConfig,
    check_conservation,
    check_growth_law,
    phase_summary,
    primacy_selection_probe,
    run_trajectory,
)
from .evalmetrics import PreferenceTriple, dpo_loss, dpo_nce_identity, pass_at_k
from .io import MatrixFormatError, load_manifest, read_matrix, sweep, write_matrix
from .ngram import (
    SuffixIndex,
    TokenCorpus,
    build_index,
    distributional_memorization,
    infty_gram_next,
)
from .spectral import (
    FeatureMatrix,
    ablate_spectrum,
    alpha_req,
    center_features,
    covariance_spectrum,
    rankme,
    spectral_metrics,
)

USAGE_ERROR = 2
COMPUTE_ERROR = 1


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _load_features(path, center: bool):
    fm = read_matrix(path)
    if center:
        return center_features(fm)
    # caller asserts the file is already centered; the flag validates it
    return FeatureMatrix(fm.data, centered=True)


# ---------------------------------------------------------------- spectral

def _cmd_spectrum(args) -> int:
    fm = _load_features(args.matrix, not args.no_center)
    spec = covariance_spectrum(fm)
    vals = [float(v) for v in spec.values]
    _emit(args, {"eigenvalues": vals, "m": fm.m, "d": fm.d},
          "\n".join(repr(v) for v in vals))
    return 0


def _cmd_rankme(args) -> int:
    fm = _load_features(args.matrix, not args.no_center)
    value = rankme(covariance_spectrum(fm))
    _emit(args, {"rankme": value}, f"rankme: {value!r}")
    return 0


def _cmd_alphareq(args) -> int:
    fm = _load_features(args.matrix, not args.no_center)
    window = tuple(args.window) if args.window else None
    alpha, r2 = alpha_req(covariance_spectrum(fm), window)
    metrics = spectral_metrics(fm, window)
    _emit(
        args,
        {"alpha_req": alpha, "fit_r2": r2, "fit_window": list(metrics.fit_window)},
        f"alpha_req: {alpha!r} (r2 {r2!r}, window {metrics.fit_window})",
    )
    return 0


def _cmd_ablate(args) -> int:
    fm = _load_features(args.matrix, center=True)
    out = ablate_spectrum(fm, args.k, args.mode)
    write_matrix(out, args.output)
    _emit(args, {"written": str(args.output), "k": args.k, "mode": args.mode},
          f"wrote {args.output}")
    return 0


def _cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest)
    report = sweep(manifest, base_dir=Path(args.manifest).parent)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (outdir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    _emit(
        args,
        {"records": len(report.records), "errors": report.errors,
         "output": str(outdir)},
        f"{len(report.records)} records, {len(report.errors)} errors -> {outdir}",
    )
    return 0 if report.ok else COMPUTE_ERROR


# ---------------------------------------------------------------- ngram

def _parse_tokens(text: str) -> list[int]:
    return [int(t) for t in text.split()]


def _read_corpus(path, vocab_size=None) -> TokenCorpus:
    """Token corpus from text (one document per line, space-separated
    decimal ids) or from a matrix file whose rows are documents."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == b"SPECGEO1":
        fm = read_matrix(path)
        if not np.all(fm.data == np.round(fm.data)) or fm.data.min() < 0:
            raise ValueError(f"{path}: matrix corpus must hold token ids")
        docs = [row.astype(np.int64).tolist() for row in fm.data]
    else:
        docs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    docs.append(_parse_tokens(line))
    tokens: list[int] = []
    boundaries: list[int] = []
    for doc in docs:
        tokens.extend(doc)
        boundaries.append(len(tokens))
    if not tokens:
        raise ValueError(f"no tokens found in {path}")
    if vocab_size is None:
        vocab_size = max(tokens) + 1
    return TokenCorpus(
        tokens=np.asarray(tokens), doc_boundaries=np.asarray(boundaries),
        vocab_size=int(vocab_size),
    )


def _cmd_ngram_build(args) -> int:
    corpus = _read_corpus(args.corpus, args.vocab_size)
    index = build_index(corpus)
    np.savez(
        args.output,
        tokens=corpus.tokens,
        doc_boundaries=corpus.doc_boundaries,
        vocab_size=np.int64(corpus.vocab_size),
        sa=index.sa,
    )
    _emit(args, {"tokens": len(corpus), "vocab_size": corpus.vocab_size,
                 "output": str(args.output)},
          f"indexed {len(corpus)} tokens -> {args.output}")
    return 0


def _load_index(path) -> SuffixIndex:
    with np.load(path) as doc:
        corpus = TokenCorpus(
            tokens=doc["tokens"],
            doc_boundaries=doc["doc_boundaries"],
            vocab_size=int(doc["vocab_size"]),
        )
    # rebuilding the derived arrays is cheap and keeps one code path
    return build_index(corpus)


def _cmd_ngram_query(args) -> int:
    index = _load_index(args.index)
    context = _parse_tokens(args.context)
    pred = infty_gram_next(index, context)
    payload = {
        "probs": [float(p) for p in pred.token_probs],
        "suffix_len_used": pred.suffix_len_used,
        "context_count": pred.context_count,
    }
    _emit(args, payload,
          f"suffix_len={pred.suffix_len_used} count={pred.context_count} "
          f"probs={np.round(pred.token_probs, 6).tolist()}")
    return 0


def _read_trace_csv(path) -> dict:
    """CSV of (example_id, token_index, prob); header row optional."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                rows.append((row[0].strip(), int(row[1]), float(row[2])))
            except (ValueError, IndexError):
                if not rows:  # tolerate one header line
                    continue
                raise ValueError(f"malformed trace row in {path}: {row}")
    if not rows:
        raise ValueError(f"no data rows in {path}")
    rows.sort(key=lambda r: (r[0], r[1]))
    return {
        "keys": [(r[0], r[1]) for r in rows],
        "probs": np.asarray([r[2] for r in rows]),
        "ids": np.asarray([r[0] for r in rows]),
    }


def _cmd_memorize(args) -> int:
    ref = _read_trace_csv(args.ref)
    model = _read_trace_csv(args.model)
    if ref["keys"] != model["keys"]:
        raise ValueError("trace files do not cover the same (example, token) keys")
    rho = distributional_memorization(
        ref["probs"], model["probs"], ref["ids"], per_token=args.per_token
    )
    _emit(args, {"memorization": rho, "per_token": bool(args.per_token)},
          f"memorization: {rho!r}")
    return 0


# ---------------------------------------------------------------- toy model

def _parse_toy_config(path) -> ToyConfig:
    """Key-value text file, one `key = value` pair per line, # comments."""
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            fields[key] = value
    kwargs = {}
    for key, cast in (
        ("d_in", int), ("d", int), ("vocab", int), ("lr", float),
        ("steps", int), ("seed", int), ("record_every", int),
        ("loss_kind", str),
    ):
        if key in fields:
            kwargs[key] = cast(fields[key])
    if "class_counts" in fields:
        kwargs["class_counts"] = tuple(
            int(v) for v in fields["class_counts"].replace(",", " ").split()
        )
    return ToyConfig(**kwargs)


def _trajectory_csv(traj) -> str:
    kf = traj.sigma_f.shape[1]
    kw = traj.sigma_w.shape[1]
    cols = (
        ["step", "loss", "rankme"]
        + [f"sigma_f_{i+1}" for i in range(kf)]
        + [f"sigma_w_{i+1}" for i in range(kw)]
        + ["align_err", "conserve_err", "a_norm"]
    )
    out = _io.StringIO()
    out.write(",".join(cols) + "\n")
    for i in range(len(traj)):
        row = (
            [str(int(traj.steps[i])), repr(float(traj.loss[i])),
             repr(float(traj.rankme[i]))]
            + [repr(float(v)) for v in traj.sigma_f[i]]
            + [repr(float(v)) for v in traj.sigma_w[i]]
            + [repr(float(traj.align_err[i])), repr(float(traj.conserve_err[i])),
               repr(float(traj.a_norm[i]))]
        )
        out.write(",".join(row) + "\n")
    return out.getvalue()


def _cmd_toy_run(args) -> int:
    cfg = _parse_toy_config(args.config) if args.config else ToyConfig()
    traj = run_trajectory(cfg)
    summary = phase_summary(traj.rankme)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "trajectory.csv").write_text(_trajectory_csv(traj), encoding="utf-8")
    doc = {
        "config": {
            "d_in": cfg.d_in, "d": cfg.d, "vocab": cfg.vocab,
            "class_counts": list(cfg.class_counts), "lr": cfg.lr,
            "steps": cfg.steps, "loss_kind": cfg.loss_kind, "seed": cfg.seed,
        },
        "phases": {
            "warmup_end": summary.warmup_end,
            "peak_index": summary.peak_index,
            "peak_value": summary.peak_value,
            "final_value": summary.final_value,
            "compression_depth": summary.compression_depth,
            "entropy_rise": summary.entropy_rise,
            "has_interior_maximum": summary.has_interior_maximum,
            "smooth_window": summary.smooth_window,
        },
        "conservation": check_conservation(traj),
        "growth_law": check_growth_law(traj) if cfg.record_every == 1 else None,
    }
    (outdir / "summary.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8"
    )
    _emit(args, doc, f"trajectory + summary -> {outdir}")
    return 0


def _cmd_toy_verify(args) -> int:
    cfg = _parse_toy_config(args.config) if args.config else ToyConfig()
    traj = run_trajectory(cfg)
    doc = {
        "conservation": check_conservation(traj),
        "growth_law": check_growth_law(traj) if cfg.record_every == 1 else None,
        "primacy": primacy_selection_probe(traj),
    }
    _emit(args, doc, json.dumps(doc, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- eval

def _read_passk_csv(path) -> list[tuple[int, int]]:
    """CSV of (problem_id, N, c); header row optional."""
    problems = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                problems.append((int(row[1]), int(row[2])))
            except (ValueError, IndexError):
                if not problems:
                    continue
                raise ValueError(f"malformed pass@k row in {path}: {row}")
    if not problems:
        raise ValueError(f"no data rows in {path}")
    return problems


def _cmd_passk(args) -> int:
    problems = _read_passk_csv(args.input)
    ks = [int(v) for v in args.k.split(",")]
    result = {str(k): pass_at_k(problems, k) for k in ks}
    _emit(args, result,
          "\n".join(f"pass@{k}: {result[str(k)]!r}" for k in ks))
    return 0


def _cmd_dpo_check(args) -> int:
    triples = []
    with open(args.input, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                triples.append(PreferenceTriple(float(row[0]), float(row[1])))
            except ValueError:
                if not triples:
                    continue
                raise
    if not triples:
        raise ValueError(f"no data rows in {args.input}")
    loss = dpo_loss(triples)
    gap = dpo_nce_identity(triples)
    _emit(args, {"dpo_loss": loss, "max_identity_gap": gap},
          f"dpo_loss: {loss!r}  max identity gap: {gap!r}")
    return 0


# ---------------------------------------------------------------- dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specgeo",
        description="spectral geometry toolkit for learned representations",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", action="store_true", help="JSON output on stdout")
        p.set_defaults(func=func)
        return p

    p = add("spectrum", _cmd_spectrum, "covariance eigenvalues of a matrix file")
    p.add_argument("matrix")
    p.add_argument("--no-center", action="store_true")

    p = add("rankme", _cmd_rankme, "effective rank of a matrix file")
    p.add_argument("matrix")
    p.add_argument("--no-center", action="store_true")

    p = add("alphareq", _cmd_alphareq, "power-law decay exponent of the spectrum")
    p.add_argument("matrix")
    p.add_argument("--no-center", action="store_true")
    p.add_argument("--window", nargs=2, type=int, metavar=("IMIN", "IMAX"))

    p = add("ablate", _cmd_ablate, "project onto / off the top-k eigenvectors")
    p.add_argument("matrix")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--mode", choices=["retain_top", "remove_top"],
                   default="retain_top")
    p.add_argument("-o", "--output", required=True)

    p = add("sweep", _cmd_sweep, "spectral metrics for a manifest of checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("-o", "--output", default="sweep_out")

    p = add("ngram-build", _cmd_ngram_build, "build a suffix index from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("-o", "--output", required=True)

    p = add("ngram-query", _cmd_ngram_query, "next-token distribution for a context")
    p.add_argument("--index", required=True)
    p.add_argument("--context", required=True,
                   help="space-separated token ids (may be empty)")

    p = add("memorize", _cmd_memorize, "rank correlation of two likelihood traces")
    p.add_argument("--ref", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--per-token", action="store_true")

    p = add("toy-run", _cmd_toy_run, "simulate the linear bottleneck classifier")
    p.add_argument("--config", help="key=value config file (defaults if omitted)")
    p.add_argument("-o", "--output", default="toy_out")

    p = add("toy-verify", _cmd_toy_verify, "alignment / growth-law diagnostics")
    p.add_argument("--config")

    p = add("passk", _cmd_passk, "unbiased pass@k from (problem, N, c) records")
    p.add_argument("--input", required=True)
    p.add_argument("--k", required=True, help="comma-separated k values")

    p = add("dpo-check", _cmd_dpo_check, "preference loss and its identity gap")
    p.add_argument("--input", required=True)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (MatrixFormatError, ValueError, OSError, RuntimeError) as exc:
        print(f"specgeo: error: {exc}", file=sys.stderr)
        return COMPUTE_ERROR


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
