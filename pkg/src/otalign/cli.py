"""Command-line interface.

Subcommands cover transport solving, pair scoring with optional heatmap
export, projection training, retrieval and localization evaluation, and
synthetic dataset generation.  Exit codes: 0 success, 1 validation or I/O
failure, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import __version__, dataio, evaluation, training
from .alignment import composed_score, cosine_similarity_matrix, export_heatmap, localize, ot_similarity
from .errors import NumericInstabilityError, OtAlignError
from .solvers import SolverConfig, solve

# margin eta and OT weight lambda per dataset regime
PRESETS = {
    "flickr30k": (0.12, 1.5),
    "mscoco": (0.05, 0.1),
}

LOCALIZE_KS = (1, 5, 10)


def _fmt(value: float) -> str:
    return f"{value:.9g}"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract reserves 2 for numerics."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _add_solver_flags(parser):
    group = parser.add_argument_group("solver")
    group.add_argument("--method", choices=("exact", "ipot", "sinkhorn"), default="ipot",
                       help="transport solver (default: %(default)s)")
    group.add_argument("--beta", type=float, default=0.5,
                       help="proximal step size for ipot (default: %(default)s)")
    group.add_argument("--epsilon", type=float, default=0.1,
                       help="entropic regularization for sinkhorn (default: %(default)s)")
    group.add_argument("--iters", type=int, default=20,
                       help="outer iterations (default: %(default)s)")
    group.add_argument("--inner-iters", type=int, default=1,
                       help="inner scaling steps per ipot iteration (default: %(default)s)")
    group.add_argument("--tolerance", type=float, default=1e-9,
                       help="marginal-residual stop tolerance (default: %(default)s)")
    group.add_argument("--log-domain", choices=("auto", "always", "never"), default="auto",
                       help="log-domain sinkhorn policy (default: %(default)s)")


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        method=args.method,
        epsilon=args.epsilon,
        beta=args.beta,
        outer_iterations=args.iters,
        inner_iterations=args.inner_iters,
        tolerance=args.tolerance,
        log_domain=args.log_domain,
    )


def _add_preset_flags(parser):
    group = parser.add_argument_group("score composition")
    group.add_argument("--preset", choices=sorted(PRESETS), default="flickr30k",
                       help="margin/OT-weight preset (default: %(default)s)")
    group.add_argument("--eta", type=float, default=None,
                       help="margin override (preset: flickr30k 0.12, mscoco 0.05)")
    group.add_argument("--lambda", dest="ot_weight", type=float, default=None,
                       help="OT weight override (preset: flickr30k 1.5, mscoco 0.1)")


def _margin_and_weight(args) -> tuple[float, float]:
    eta, lam = PRESETS[args.preset]
    if args.eta is not None:
        eta = args.eta
    if args.ot_weight is not None:
        lam = args.ot_weight
    return eta, lam


def _add_threads_flag(parser):
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for scoring (default: available cores)")


def _config_hash(args, keys) -> str:
    payload = {key: getattr(args, key) for key in keys}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("ascii"))
    return digest.hexdigest()[:16]


_SOLVER_KEYS = ("method", "beta", "epsilon", "iters", "inner_iters", "tolerance", "log_domain")


def cmd_solve(args) -> int:
    cost = dataio.read_matrix(args.cost)
    mu = dataio.read_histogram(args.mu)
    nu = dataio.read_histogram(args.nu)
    plan, distance, _ = solve(cost, mu, nu, _solver_config(args))
    if args.out_plan is not None:
        dataio.write_matrix(args.out_plan, plan.entries)
    print(f"distance = {_fmt(distance)}")
    return 0


def cmd_score(args) -> int:
    image = dataio.read_feature_bag(args.image_bag)
    text = dataio.read_feature_bag(args.text_bag)
    _, lam = _margin_and_weight(args)
    result = composed_score(image, text, lam, _solver_config(args))
    if args.heatmap_out is not None:
        export_heatmap(result, args.heatmap_out)
    print(f"s_cos = {_fmt(result.s_cos)}")
    print(f"s_ot = {_fmt(result.s_ot)}")
    print(f"s = {_fmt(result.s_composed)}")
    return 0


def cmd_train(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    pairs = dataio.load_pair_arrays(manifest)
    if not pairs:
        raise OtAlignError(f"{args.manifest}: manifest holds no pairs to train on")
    eta, lam = _margin_and_weight(args)
    config = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lr_decay_factor=args.lr_decay_factor,
        lr_decay_epoch=args.lr_decay_epoch,
        grad_clip_norm=args.clip,
        seed=args.seed,
        solver=_solver_config(args),
    )
    params = training.initialize_params(
        args.embed_dim, pairs[0][0].shape[1], pairs[0][1].shape[1], lam, eta, seed=args.seed
    )
    final, trace = training.train(pairs, config, params)
    training.save_checkpoint(args.checkpoint_out, final, config)
    for epoch, loss in enumerate(trace):
        print(f"epoch {epoch}: loss = {_fmt(loss)}")
    print(f"checkpoint = {args.checkpoint_out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    pairs = dataio.load_pair_arrays(manifest)
    params, _ = training.load_checkpoint(args.checkpoint)
    scores = training.batch_score_matrix(pairs, params, _solver_config(args), threads=args.threads)
    metrics = evaluation.retrieval_metrics(scores)
    for line in evaluation.format_metric_lines(metrics):
        print(line)
    if args.report_out is not None:
        metadata = {
            "dataset": str(args.manifest),
            "checkpoint": str(args.checkpoint),
            "pairs": len(pairs),
            "config_hash": _config_hash(args, _SOLVER_KEYS),
        }
        evaluation.write_metric_report(args.report_out, metrics, metadata)
    return 0


def _localize_record(rec, raw_image, raw_text, params, config, mode):
    if rec.phrase_gold is None or rec.region_boxes is None:
        return [], []
    v = training.project(raw_image, params.image_projection)
    e = training.project(raw_text, params.text_projection)
    if mode == "transport":
        _, source = ot_similarity(v, e, config)
    else:
        source = cosine_similarity_matrix(v, e)
    boxes = [evaluation.BoundingBox(*b) for b in rec.region_boxes]
    cases = []
    predictions = []
    for token_index, gold in sorted(rec.phrase_gold.items()):
        gold_boxes = [evaluation.BoundingBox(*b) for b in gold]
        cases.append(evaluation.LocalizationCase(token_index, boxes, gold_boxes))
        predictions.append(localize(source, token_index))
    return cases, predictions


def cmd_eval_localize(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    pairs = dataio.load_pair_arrays(manifest)
    params, _ = training.load_checkpoint(args.checkpoint)
    config = _solver_config(args)

    def one(item):
        rec, (raw_image, raw_text) = item
        return _localize_record(rec, raw_image, raw_text, params, config, args.mode)

    items = list(zip(manifest.records, pairs))
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    cases = [case for rec_cases, _ in results for case in rec_cases]
    predictions = [pred for _, rec_preds in results for pred in rec_preds]
    if not cases:
        raise OtAlignError(f"{args.manifest}: no records carry region boxes and phrase ground truth")
    metrics = {
        f"loc_R@{k}": evaluation.localization_recall(cases, predictions, k, args.iou_threshold)
        for k in LOCALIZE_KS
    }
    for line in evaluation.format_metric_lines(metrics):
        print(line)
    if args.report_out is not None:
        metadata = {
            "dataset": str(args.manifest),
            "checkpoint": str(args.checkpoint),
            "mode": args.mode,
            "cases": len(cases),
            "iou_threshold": args.iou_threshold,
            "config_hash": _config_hash(args, _SOLVER_KEYS),
        }
        evaluation.write_metric_report(args.report_out, metrics, metadata)
    return 0


def cmd_synth(args) -> int:
    config = dataio.SyntheticConfig(
        num_pairs=args.pairs,
        num_clusters=args.clusters,
        regions=args.regions,
        tokens=args.tokens,
        raw_dim=args.raw_dim,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    manifest, _ = dataio.generate_synthetic(config, args.out_dir)
    print(f"wrote {len(manifest.records)} pairs to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="otalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("solve", help="solve one transport problem from files",
                       description="Solve min <T, C> over the transport polytope and print the distance.")
    p.add_argument("cost", help="cost matrix file (text matrix format)")
    p.add_argument("mu", help="source marginal file (text histogram format)")
    p.add_argument("nu", help="target marginal file (text histogram format)")
    p.add_argument("--out-plan", default=None, help="write the plan as a text matrix here")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("score", help="score one image bag against one text bag",
                       description="Print the sum-max cosine score, the OT score, and the composed score.")
    p.add_argument("image_bag", help="image feature bag file")
    p.add_argument("text_bag", help="text feature bag file")
    p.add_argument("--heatmap-out", default=None,
                   help="prefix for plan/similarity/meta heatmap artifacts")
    _add_preset_flags(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train the two projection layers",
                       description="Train projections with the hardest-negative triplet loss and save a checkpoint.")
    p.add_argument("manifest", help="dataset manifest file")
    p.add_argument("--checkpoint-out", required=True, help="where to write the trained checkpoint")
    p.add_argument("--embed-dim", type=int, required=True, help="shared embedding dimension")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=128, help="mini-batch size (default: %(default)s)")
    p.add_argument("--lr", type=float, default=0.0002, help="Adam learning rate (default: %(default)s)")
    p.add_argument("--lr-decay-factor", type=float, default=0.1,
                   help="learning-rate multiplier after the decay epoch (default: %(default)s)")
    p.add_argument("--lr-decay-epoch", type=int, default=15,
                   help="epoch at which the decay factor kicks in (default: %(default)s)")
    p.add_argument("--clip", type=float, default=2.0, help="gradient clip norm (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="init and shuffle seed (default: %(default)s)")
    _add_preset_flags(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="retrieval recalls on a paired dataset",
                       description="Score all pairs with a checkpoint and print R@1/5/10 both ways plus rsum.")
    p.add_argument("manifest", help="dataset manifest file")
    p.add_argument("checkpoint", help="trained checkpoint file")
    p.add_argument("--report-out", default=None, help="prefix for .txt/.json metric reports")
    _add_threads_flag(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-localize", help="phrase localization recall",
                       description="Rank region boxes per token via the plan or the similarity and print loc_R@K.")
    p.add_argument("manifest", help="dataset manifest file with boxes and phrase ground truth")
    p.add_argument("checkpoint", help="trained checkpoint file")
    p.add_argument("--mode", choices=("transport", "similarity"), default="transport",
                   help="ranking source (default: %(default)s)")
    p.add_argument("--iou-threshold", type=float, default=0.5,
                   help="IoU needed for a correct localization (default: %(default)s)")
    p.add_argument("--report-out", default=None, help="prefix for .txt/.json metric reports")
    _add_threads_flag(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_eval_localize)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset",
                       description="Write feature bags, a manifest, and a hidden alignment file.")
    p.add_argument("out_dir", help="output directory (created if missing)")
    p.add_argument("--pairs", type=int, default=100, help="number of pairs (default: %(default)s)")
    p.add_argument("--clusters", type=int, default=100, help="number of prototype clusters (default: %(default)s)")
    p.add_argument("--regions", type=int, default=4, help="regions per image (default: %(default)s)")
    p.add_argument("--tokens", type=int, default=4, help="tokens per text (default: %(default)s)")
    p.add_argument("--raw-dim", type=int, default=16, help="raw feature dimension (default: %(default)s)")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="feature noise scale (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericInstabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OtAlignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
