"""Command-line surface wiring the library together.

Subcommands: synth, index, train, infer, baseline, eval, stats. Every
command is a deterministic function of its inputs and --seed; --threads
may parallelize per-query work but never changes output bytes. A --config
file of key=value lines supplies defaults; explicit flags win.

Exit codes: 0 success, 2 usage error, 3 parse/read error, 4 compute error.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import evaluation, retrieval, synthetic, trainer
from .embeddings import load_embeddings, save_embeddings
from .errors import InvalidRecord, MatchgraphError, ParseError
from .gcn import load_model, save_model
from .knn import build_index
from .subgraph import QesParams

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_COMPUTE = 4

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _configure_logging() -> None:
    level = os.environ.get("MATCHGRAPH_LOG", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _read_config(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise InvalidRecord(f"config line {lineno} is not key=value: {stripped!r}")
            key, _, value = stripped.partition("=")
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _resolve(args, cfg, name, default, cast):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in cfg:
        raw = cfg[name]
        try:
            return cast(raw)
        except ValueError:
            raise InvalidRecord(f"config value {name}={raw!r} is not a valid {cast.__name__}")
    return default


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read_queries(path: str) -> list[int]:
    queries = []
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            stripped = line.strip()
            if stripped:
                try:
                    queries.append(int(stripped))
                except ValueError:
                    raise InvalidRecord(f"bad query id {stripped!r}")
    return queries


def _load_embeddings_file(path: str):
    with open(path, "rb") as fp:
        return load_embeddings(fp)


def _map_queries(fn, queries, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, queries))
    return [fn(q) for q in queries]


def _qes_params(args, cfg) -> QesParams:
    return QesParams(
        k1=_resolve(args, cfg, "k1", 100, int),
        k2=_resolve(args, cfg, "k2", 5, int),
        u=_resolve(args, cfg, "u", 10, int),
    )


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text)


def cmd_synth(args, cfg) -> int:
    config = synthetic.SceneConfig(
        n_images=_resolve(args, cfg, "n_images", 360, int),
        symmetry_s=_resolve(args, cfg, "symmetry", 1, int),
        overlap_angle=_resolve(args, cfg, "overlap_angle", 0.2617993877991494, float),
        noise_sigma=_resolve(args, cfg, "noise_sigma", 0.0, float),
        dim=_resolve(args, cfg, "dim", 32, int),
        seed=_resolve(args, cfg, "seed", 0, int),
    )
    scene = synthetic.generate_scene(config)
    with open(args.embeddings, "wb") as fp:
        fp.write(save_embeddings(scene.embeddings))
    _write_text(args.overlaps, trainer.save_overlaps(scene.overlaps))
    if args.classes:
        _write_text(args.classes, synthetic.save_classes(scene.classes))
    return EXIT_OK


def cmd_index(args, cfg) -> int:
    emb = _load_embeddings_file(args.embeddings)
    index = build_index(emb)
    if args.knn_out:
        k = _resolve(args, cfg, "k", 10, int)
        lines = []
        for q in sorted(emb.ids):
            parts = [str(q)]
            for v, d in index.neighbors(q, k).neighbors:
                parts.append(str(v))
                parts.append(repr(d))
            lines.append(" ".join(parts))
        _write_text(args.knn_out, "\n".join(lines) + "\n")
    sys.stdout.write(f"ok n={len(emb)} d={emb.dim}\n")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    emb = _load_embeddings_file(args.embeddings)
    with open(args.overlaps, "r", encoding="utf-8") as fp:
        records = trainer.load_overlaps(fp.read())
    queries = _read_queries(args.queries) if args.queries else sorted(emb.ids)
    config = trainer.TrainConfig(
        tau_mo=_resolve(args, cfg, "tau_mo", 0.25, float),
        tau_ct=_resolve(args, cfg, "tau_ct", 0.15, float),
        qes_params=_qes_params(args, cfg),
        learning_rate=_resolve(args, cfg, "lr", 1e-3, float),
        epochs=_resolve(args, cfg, "epochs", 50, int),
        batch_size=_resolve(args, cfg, "batch_size", 16, int),
        seed=_resolve(args, cfg, "seed", 0, int),
        beta1=_resolve(args, cfg, "beta1", 0.9, float),
        beta2=_resolve(args, cfg, "beta2", 0.999, float),
    )
    conv_widths = _resolve(args, cfg, "conv_widths", (256, 256, 128, 128), _widths)
    fc_widths = _resolve(args, cfg, "fc_widths", (64,), _widths)
    log.info("training on %d queries, %d overlap records", len(queries), len(records))
    model, history = trainer.train(emb, records, queries, config,
                                   conv_widths=conv_widths, fc_widths=fc_widths)
    if history:
        log.info("final epoch loss %.6f, fmeasure %.4f",
                 history[-1].loss, history[-1].fmeasure)
    with open(args.model, "wb") as fp:
        fp.write(save_model(model))
    rows = ["epoch,loss,precision,recall,fmeasure"]
    rows += [
        f"{h.epoch},{h.loss!r},{h.precision!r},{h.recall!r},{h.fmeasure!r}"
        for h in history
    ]
    _write_text(args.history_out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    emb = _load_embeddings_file(args.embeddings)
    with open(args.model, "rb") as fp:
        model = load_model(fp.read())
    index = build_index(emb)
    params = _qes_params(args, cfg)
    threshold = _resolve(args, cfg, "prob_threshold", 0.5, float)
    queries = _read_queries(args.queries) if args.queries else sorted(emb.ids)
    threads = _resolve(args, cfg, "threads", 1, int)

    def one(q):
        return retrieval.gcn_retrieve(model, index, emb, q, params, threshold)

    results = _map_queries(one, queries, threads)
    if log.isEnabledFor(logging.INFO):
        log.info("retrieved %d pairs for %d queries",
                 len(retrieval.collapse_pairs(results)), len(queries))
    with open(args.pairs_out, "w", encoding="utf-8") as fp:
        retrieval.export_pairs(results, fp)
    if args.results_out:
        rows = ["query_id,image_id,score"]
        for result in results:
            rows += [f"{result.query_id},{v},{s!r}" for v, s in result.retrieved]
        _write_text(args.results_out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_baseline(args, cfg) -> int:
    topk = _resolve(args, cfg, "topk", None, int)
    tau = _resolve(args, cfg, "tau_dist", None, float)
    if (topk is None) == (tau is None):
        sys.stderr.write("matchgraph: error: give exactly one of --topk / --tau-dist\n")
        return EXIT_USAGE
    emb = _load_embeddings_file(args.embeddings)
    index = build_index(emb)
    queries = _read_queries(args.queries) if args.queries else sorted(emb.ids)
    threads = _resolve(args, cfg, "threads", 1, int)

    def one(q):
        if topk is not None:
            return retrieval.topk_retrieve(index, q, topk)
        return retrieval.threshold_retrieve(index, q, tau)

    results = _map_queries(one, queries, threads)
    with open(args.pairs_out, "w", encoding="utf-8") as fp:
        retrieval.export_pairs(results, fp)
    if args.results_out:
        rows = ["query_id,image_id,score"]
        for result in results:
            rows += [f"{result.query_id},{v},{s!r}" for v, s in result.retrieved]
        _write_text(args.results_out, "\n".join(rows) + "\n")
    return EXIT_OK


def _load_truth(args, cfg) -> evaluation.GroundTruth:
    if args.truth_pairs:
        with open(args.truth_pairs, "r", encoding="utf-8") as fp:
            pairs = retrieval.read_pair_file(fp.read())
        return evaluation.GroundTruth.from_pairs([(a, b) for a, b, _ in pairs])
    if args.overlaps:
        with open(args.overlaps, "r", encoding="utf-8") as fp:
            records = trainer.load_overlaps(fp.read())
        return evaluation.GroundTruth.from_records(
            records.records(),
            _resolve(args, cfg, "tau_mo", 0.25, float),
            _resolve(args, cfg, "tau_ct", 0.15, float),
        )
    raise InvalidRecord("ground truth requires --truth-pairs or --overlaps")


def cmd_eval(args, cfg) -> int:
    with open(args.pairs, "r", encoding="utf-8") as fp:
        predicted_pairs = retrieval.read_pair_file(fp.read())
    truth = _load_truth(args, cfg)
    predicted = retrieval.pairs_to_query_sets(predicted_pairs)
    if args.queries:
        queries = _read_queries(args.queries)
    else:
        queries = sorted(set(predicted) | set(truth.universe))
    per_query = {
        q: evaluation.per_query_prf(predicted.get(q, set()), truth.relevant(q))
        for q in queries
    }
    _write_text(args.report_out, evaluation.write_metrics_report(per_query))
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    with open(args.pairs, "r", encoding="utf-8") as fp:
        pairs = retrieval.read_pair_file(fp.read())
    truth = _load_truth(args, cfg)
    classes = None
    if args.classes:
        with open(args.classes, "r", encoding="utf-8") as fp:
            classes = synthetic.load_classes(fp.read())
    results = [
        retrieval.RetrievalResult(a, ((b, score),), "gcn")
        for a, b, score in pairs
    ]
    stats = evaluation.view_graph_stats(results, truth, classes)
    cross = "NA" if stats.cross_class_false_positives is None else stats.cross_class_false_positives
    text = (
        "metric,value\n"
        f"true_positive_pairs,{stats.true_positive_pairs}\n"
        f"false_positive_pairs,{stats.false_positive_pairs}\n"
        f"cross_class_false_positives,{cross}\n"
    )
    _write_text(args.report_out, text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchgraph",
        description="Matchable image pair retrieval for structure-from-motion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", default=None, help="key=value defaults; flags win")

    p = sub.add_parser("synth", help="generate a synthetic ring scene")
    common(p)
    p.add_argument("--embeddings", required=True, help="output embedding file")
    p.add_argument("--overlaps", required=True, help="output overlap records")
    p.add_argument("--classes", default=None, help="output symmetry-class file")
    p.add_argument("--n-images", dest="n_images", type=int, default=None)
    p.add_argument("--symmetry", type=int, default=None)
    p.add_argument("--overlap-angle", dest="overlap_angle", type=float, default=None)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="validate embeddings, optionally dump neighbor lists")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--knn-out", dest="knn_out", default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="train the subgraph classifier")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--overlaps", required=True)
    p.add_argument("--model", required=True, help="output checkpoint path")
    p.add_argument("--queries", default=None, help="file of training query ids")
    p.add_argument("--history-out", dest="history_out", default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--u", type=int, default=None)
    p.add_argument("--tau-mo", dest="tau_mo", type=float, default=None)
    p.add_argument("--tau-ct", dest="tau_ct", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--conv-widths", dest="conv_widths", type=_widths, default=None)
    p.add_argument("--fc-widths", dest="fc_widths", type=_widths, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify subgraphs and export matchable pairs")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs-out", dest="pairs_out", required=True)
    p.add_argument("--results-out", dest="results_out", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--u", type=int, default=None)
    p.add_argument("--prob-threshold", dest="prob_threshold", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("baseline", help="top-k or distance-threshold retrieval")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pairs-out", dest="pairs_out", required=True)
    p.add_argument("--results-out", dest="results_out", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--tau-dist", dest="tau_dist", type=float, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score a pair file against ground truth")
    common(p)
    p.add_argument("--pairs", required=True, help="predicted pair file")
    p.add_argument("--overlaps", default=None, help="overlap records as ground truth")
    p.add_argument("--truth-pairs", dest="truth_pairs", default=None,
                   help="pair file as ground truth")
    p.add_argument("--tau-mo", dest="tau_mo", type=float, default=None)
    p.add_argument("--tau-ct", dest="tau_ct", type=float, default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--report-out", dest="report_out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="view-graph diagnostics of a pair file")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--overlaps", default=None)
    p.add_argument("--truth-pairs", dest="truth_pairs", default=None)
    p.add_argument("--tau-mo", dest="tau_mo", type=float, default=None)
    p.add_argument("--tau-ct", dest="tau_ct", type=float, default=None)
    p.add_argument("--classes", default=None)
    p.add_argument("--report-out", dest="report_out", default=None)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = _read_config(args.config) if args.config else {}
        return args.func(args, cfg)
    except ParseError as exc:
        sys.stderr.write(f"matchgraph: parse error: {exc}\n")
        return EXIT_PARSE
    except OSError as exc:
        sys.stderr.write(f"matchgraph: parse error: {exc}\n")
        return EXIT_PARSE
    except (MatchgraphError, ValueError) as exc:
        sys.stderr.write(f"matchgraph: compute error: {exc}\n")
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
