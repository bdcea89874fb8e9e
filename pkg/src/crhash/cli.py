"""Command-line entry point: ``crh <subcommand> ...``.

Logs go to stderr; machine-readable JSON goes to stdout or the given files.
Exit codes: 0 success, 2 usage, 3 data error, 4 infeasible assignment.
On failure the last stderr line is ``crh-error: {"code": ..., "type": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .assignment import centers_from_json, reassign_centers
from .data import (
    SynthSpec,
    generate_synthetic,
    import_csv,
    read_dataset,
    read_embeddings,
    write_dataset,
    write_embeddings,
)
from .errors import ConfigError, CRHError, DataFormatError
from .evaluation import map_at_k, semantic_alignment_report
from .hamming import (
    HeadLayout,
    binarize,
    codebook_distance_stats,
    read_codebook,
    sample_codebook,
    write_codebook,
)
from .model import encode, load_checkpoint
from .trainer import TrainConfig, train, write_run

log = logging.getLogger("crhash")


class UsageError(ConfigError):
    exit_code = 2


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_json(arg: str) -> dict:
    """A JSON object given inline or as a path."""
    text = arg.strip()
    if not text.startswith("{"):
        try:
            text = Path(arg).read_text()
        except OSError as exc:
            raise DataFormatError(f"cannot read {arg}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON in {arg}: {exc}") from None
    if not isinstance(obj, dict):
        raise DataFormatError(f"{arg} must hold a JSON object")
    return obj


def _positive(name: str, value: int | None) -> None:
    if value is not None and value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


def _executor(threads: int):
    _positive("threads", threads)
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext(None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_codebook(args) -> int:
    _positive("k", args.k)
    _positive("m", args.m)
    if args.sampling == "unique" and args.k < 64 and args.m > (1 << args.k):
        raise UsageError(f"--m {args.m} exceeds the {1 << args.k} codes of a {args.k}-bit space")
    cb = sample_codebook(args.k, args.m, args.sampling, args.seed)
    write_codebook(cb, args.out)
    report = {"K": cb.K, "M": cb.M, "sampling": args.sampling, "seed": args.seed,
              "duplicates": sum(len(g) - 1 for g in cb.duplicate_groups())}
    if cb.M >= 2:
        report.update(codebook_distance_stats(cb).as_dict())
    _emit(report)
    return 0


def cmd_synth(args) -> int:
    data = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SynthSpec.from_dict(data)
    res = generate_synthetic(spec)
    write_dataset(res.dataset, args.out_data)
    if args.out_queries:
        if res.queries is None:
            raise UsageError("--out-queries needs queries_per_class > 0")
        write_dataset(res.queries, args.out_queries)
    if args.out_embeddings:
        if args.embeddings_mode == "class":
            emb = res.prototypes
        else:
            # per sample: the prototype weighted mean over each sample's labels
            y = res.dataset.labels.astype(np.float64)
            emb = (y / y.sum(axis=1, keepdims=True)) @ res.prototypes
        write_embeddings(emb, args.out_embeddings)
    if args.out_simref:
        _emit({"C": spec.C, "matrix": res.simref.tolist()}, args.out_simref)
    _emit({"N": res.dataset.N, "D": res.dataset.D, "C": res.dataset.C,
           "queries": 0 if res.queries is None else res.queries.N, "spec": spec.to_dict()})
    return 0


def cmd_train(args) -> int:
    cfg_dict = _load_json(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    config = TrainConfig.from_dict(cfg_dict)
    _positive("threads", args.threads)
    ds = read_dataset(args.data)
    with _executor(args.threads) as ex:
        result = train(config, ds, executor=ex)
    manifest = write_run(result, args.out_dir)
    last = result.history.records[-1] if len(result.history) else None
    _emit({"out_dir": str(args.out_dir), "epochs_run": manifest["epochs_run"],
           "final_loss": None if last is None else last.loss, "files": manifest["files"]})
    return 0


def _load_simref(path: str, c: int) -> np.ndarray:
    obj = _load_json(path)
    mat = np.asarray(obj.get("matrix"), dtype=np.float64)
    if mat.shape != (c, c):
        raise DataFormatError(f"simref matrix is {mat.shape}, expected ({c}, {c})")
    return mat


def cmd_eval(args) -> int:
    _positive("k", args.k)
    model = load_checkpoint(args.model)
    centers = centers_from_json(_load_json(args.assignment))
    db = read_dataset(args.data)
    qs = read_dataset(args.queries) if args.queries else db
    if db.C != centers.shape[0] or qs.C != db.C:
        raise DataFormatError(f"class counts disagree: data {db.C}, queries {qs.C}, centers {centers.shape[0]}")
    db_codes = binarize(encode(model, db.features))
    q_codes = binarize(encode(model, qs.features))
    metrics = {
        "map": map_at_k(db_codes, db.labels, q_codes, qs.labels, args.k, args.exclude_unanswerable),
        "k": args.k,
        "num_queries": qs.N,
        "pcc": None,
    }
    if args.simref:
        report = semantic_alignment_report(centers, simref=_load_simref(args.simref, db.C))
        metrics["pcc"] = report.pcc
    elif args.embeddings:
        emb = read_embeddings(args.embeddings, db.N)
        report = semantic_alignment_report(centers, embeddings=emb, labels=db.labels)
        metrics["pcc"] = report.pcc
    stats = codebook_distance_stats(centers)
    metrics["d_min"] = stats.d_min
    metrics["d_avg"] = stats.d_avg_float
    _emit(metrics, args.out)
    return 0


def cmd_reassign(args) -> int:
    _positive("heads", args.heads)
    model = load_checkpoint(args.model)
    ds = read_dataset(args.data)
    cb = read_codebook(args.codebook)
    layout = HeadLayout.for_bits(cb.K, heads=args.heads)
    if model.K != cb.K:
        raise DataFormatError(f"model emits {model.K} bits, codebook has {cb.K}")
    codes = binarize(encode(model, ds.features))
    rng = np.random.default_rng(args.seed)
    new = reassign_centers(codes, ds.labels, cb, layout, args.solver, rng, args.order_scope)
    report = {"solver": args.solver, "H": layout.H,
              "head_costs": [float(t) for t in new.totals],
              "head_costs_exact": [[t.numerator, t.denominator] for t in new.totals],
              "changes": None}
    if args.previous:
        prev = centers_from_json(_load_json(args.previous))
        if prev.shape != (ds.C, cb.K):
            raise DataFormatError("previous assignment does not match this data/codebook")
        report["changes"] = int((prev != new.center_signs()).any(axis=1).sum())
    _emit(new.to_json_dict(), args.out)
    _emit(report)
    return 0


def cmd_import_csv(args) -> int:
    ds = import_csv(args.csv, args.num_classes)
    write_dataset(ds, args.out)
    _emit({"N": ds.N, "D": ds.D, "C": ds.C, "single_label": ds.single_label})
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crh", description="Center-reassigned hashing toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-codebook", help="sample a codebook and write a CRHC file")
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--sampling", choices=("unique", "bernoulli"), default="unique")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_codebook)

    s = sub.add_parser("synth", help="generate a synthetic hierarchical dataset")
    s.add_argument("--spec", help="JSON object (inline or path); defaults for missing fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-data", required=True)
    s.add_argument("--out-queries")
    s.add_argument("--out-embeddings")
    s.add_argument("--embeddings-mode", choices=("sample", "class"), default="sample")
    s.add_argument("--out-simref")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a hash head with center reassignment")
    t.add_argument("--config", required=True, help="TrainConfig JSON (inline or path)")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval mAP and semantic alignment")
    e.add_argument("--model", required=True)
    e.add_argument("--assignment", required=True)
    e.add_argument("--data", required=True, help="database dataset")
    e.add_argument("--queries", help="query dataset (default: the database)")
    e.add_argument("--k", type=int, help="mAP cutoff (default: all)")
    e.add_argument("--embeddings", help="per-sample CRHE embeddings of --data")
    e.add_argument("--simref", help="reference similarity JSON")
    e.add_argument("--exclude-unanswerable", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reassign", help="one-shot reassignment from a trained model")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--codebook", required=True)
    r.add_argument("--heads", type=int, default=1)
    r.add_argument("--solver", choices=("greedy", "hungarian"), default="greedy")
    r.add_argument("--order-scope", choices=("per_head", "per_event"), default="per_head")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--previous", help="assignment JSON to count changes against")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reassign)

    c = sub.add_parser("import-csv", help="convert features+labels CSV to CRHF")
    c.add_argument("--csv", required=True)
    c.add_argument("--num-classes", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_import_csv)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("crhash").setLevel(logging.INFO)
        return args.func(args)
    except CRHError as exc:
        code = exc.exit_code
        err = exc
    except FileNotFoundError as exc:
        code, err = DataFormatError.exit_code, exc
    except OSError as exc:
        code, err = DataFormatError.exit_code, exc
    line = json.dumps({"code": code, "type": type(err).__name__, "message": str(err)})
    sys.stderr.write(f"crh-error: {line}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
