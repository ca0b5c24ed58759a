"""prism25d command line: synth, ingest, compact, stats, train, eval."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .attention import DEFAULT_BANDWIDTHS
from .compact import MatchParams, attach_motion, compact, corpus_stats
from .errors import ParseError, PrismError
from .graph import (
    ClassRegistry,
    SceneGraph25D,
    load_corpus,
    load_detection_groups,
    save_corpus,
    save_graph,
)
from .lift import Intrinsics
from .qa import (
    ModelConfig,
    TrainConfig,
    evaluate,
    init_model,
    load_model,
    load_qa,
    save_model,
    train,
)
from .register import register_frames
from . import synthworld

STATS_FORMAT = "prism25d-stats"
STATS_VERSION = 1
METRICS_FORMAT = "prism25d-metrics"
METRICS_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as exit-1 JSON errors."""

    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(1)


def _emit_error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write_json(obj: dict, path: str) -> None:
    Path(path).write_text(json.dumps(obj) + "\n", encoding="utf-8")


def _sigma_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ParseError(f"bad bandwidth list {text!r}") from exc
    if not values:
        raise ParseError(f"bad bandwidth list {text!r}")
    return values


@dataclass
class RunConfig:
    """Defaults for every tunable; config file values lose to explicit flags."""

    gamma: float = 0.5  # artifact default; the merge threshold is CLI-tuned
    delta: int = 3
    sigmas: tuple[float, ...] = DEFAULT_BANDWIDTHS  # reference hierarchy
    sigma_t: tuple[float, ...] | None = None  # None keeps sigma_t = sigma_s
    heads: int = 4  # reference default
    latent: int = 32  # desk-scale width; reference models ran 128-256
    lr: float = 1e-3  # reference default; desk-scale runs often want 2e-3
    batch: int = 16  # artifact default
    epochs: int = 25  # artifact default
    seed: int = 0
    vocab: int = synthworld.VOCAB_SIZE
    standard_layers: int = 1  # stacked plain-attention blocks in the encoder
    combine: bool = True
    max_frames: int | None = None
    image_w: float = 256.0
    image_h: float = 256.0
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None

    @staticmethod
    def resolve(args) -> "RunConfig":
        cfg = RunConfig()
        file_values = _read_json(args.config) if getattr(args, "config", None) else {}
        for key, value in file_values.items():
            if not hasattr(cfg, key):
                raise ParseError(f"unknown config key {key!r}")
            if key in ("sigmas", "sigma_t") and value is not None:
                value = tuple(float(v) for v in value)
            setattr(cfg, key, value)
        for key in vars(cfg):
            flag = getattr(args, key, None)
            if flag is not None:
                setattr(cfg, key, flag)
        if getattr(args, "no_combine", False):
            cfg.combine = False
        return cfg

    def intrinsics(self) -> Intrinsics | None:
        given = [self.fx, self.fy, self.cx, self.cy]
        if all(v is None for v in given):
            return None  # loader falls back to image-size defaults
        if any(v is None for v in given):
            raise ParseError("intrinsics need all of --fx --fy --cx --cy")
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)


def _load_registry(path: str) -> ClassRegistry:
    return ClassRegistry.load(path)


def _pipeline_graphs(
    detections: str, registry: ClassRegistry, cfg: RunConfig, jobs: int = 1
) -> dict[str, SceneGraph25D]:
    """ingest -> register -> compact -> attach_motion for every video in the file."""
    graphs = load_detection_groups(
        detections,
        registry,
        max_frames=cfg.max_frames,
        intrinsics=cfg.intrinsics(),
        image_size=(cfg.image_w, cfg.image_h),
    )
    params = MatchParams(gamma=cfg.gamma, delta=cfg.delta)

    def run(g: SceneGraph25D) -> SceneGraph25D:
        return attach_motion(compact(register_frames(g, gamma=cfg.gamma), params))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(run, graphs))
    else:
        done = [run(g) for g in graphs]
    return {g.video_id: g for g in done}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec_obj = _read_json(args.spec)
    specs = [
        synthworld.WorldSpec.from_json(w)
        for w in (spec_obj["worlds"] if "worlds" in spec_obj else [spec_obj])
    ]
    all_instances = []
    truths = {}
    first = True
    for spec in specs:
        world = synthworld.build_world(spec)
        records = synthworld.world_detections(world)
        truth = synthworld.world_truth(world)
        if args.out_qa:
            instances, derivations = synthworld.generate_qa(
                world, truth, args.task, args.qa_per_world, args.qa_seed
            )
            all_instances.extend(instances)
            truth.qa = derivations
        synthworld.write_detections(records, args.out_detections, append=not first)
        truths[spec.video_id] = truth.to_json()
        first = False
    if args.out_qa:
        from .qa import save_qa

        save_qa(all_instances, args.out_qa)
    if args.out_truth:
        _write_json({"format": "prism25d-truth", "version": 1, "videos": truths}, args.out_truth)
    if args.out_registry:
        synthworld.default_registry().save(args.out_registry)
    print(f"generated {len(specs)} worlds -> {args.out_detections}")
    return 0


def cmd_ingest(args) -> int:
    cfg = RunConfig.resolve(args)
    registry = _load_registry(args.registry)
    graphs = load_detection_groups(
        args.inp,
        registry,
        max_frames=cfg.max_frames,
        intrinsics=cfg.intrinsics(),
        image_size=(cfg.image_w, cfg.image_h),
    )
    if not args.no_register:
        graphs = [register_frames(g, gamma=cfg.gamma) for g in graphs]
    if len(graphs) == 1:
        save_graph(graphs[0], args.out)
    else:
        save_corpus(graphs, args.out)
    print(f"ingested {len(graphs)} videos -> {args.out}")
    return 0


def cmd_compact(args) -> int:
    cfg = RunConfig.resolve(args)
    params = MatchParams(gamma=cfg.gamma, delta=cfg.delta)
    before = load_corpus(args.inp)

    def run(g: SceneGraph25D) -> SceneGraph25D:
        return compact(g, params)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            after = list(pool.map(run, before))
    else:
        after = [run(g) for g in before]

    if len(after) == 1:
        save_graph(after[0], args.out)
    else:
        save_corpus(after, args.out)
    stats = corpus_stats(list(zip(before, after)))
    if args.stats:
        _write_json({"format": STATS_FORMAT, "version": STATS_VERSION, **stats}, args.stats)
    print(
        f"compacted {stats['videos']} videos: {stats['full']:.2f} -> "
        f"{stats['static'] + stats['dynamic']:.2f} nodes/video "
        f"({stats['reduction_pct']:.1f}% reduction)"
    )
    return 0


def cmd_stats(args) -> int:
    before = load_corpus(args.before)
    after = load_corpus(args.after)
    by_id = {g.video_id: g for g in after}
    missing = [g.video_id for g in before if g.video_id not in by_id]
    if missing:
        raise ParseError(f"after-file lacks videos {missing}")
    stats = corpus_stats([(g, by_id[g.video_id]) for g in before])
    for key in ("videos", "full", "static", "dynamic", "reduction_pct"):
        value = stats[key]
        print(f"{key:<14} {value:.2f}" if isinstance(value, float) else f"{key:<14} {value}")
    if args.out:
        _write_json({"format": STATS_FORMAT, "version": STATS_VERSION, **stats}, args.out)
    return 0


def _infer_dims(graphs: dict[str, SceneGraph25D]) -> tuple[int, int]:
    d_o = d_a = None
    for g in graphs.values():
        for node in g.nodes.values():
            d_o = len(node.feature) if d_o is None else d_o
            if node.motion_feature is not None and d_a is None:
                d_a = len(node.motion_feature)
    if d_o is None:
        raise ParseError("no nodes found; cannot infer feature dimensions")
    return d_o, 0 if d_a is None else d_a


def _model_config(cfg: RunConfig, graphs: dict[str, SceneGraph25D]) -> ModelConfig:
    d_o, d_a = _infer_dims(graphs)
    return ModelConfig(
        d_o=d_o,
        d_a=d_a,
        vocab_size=cfg.vocab,
        latent_dim=cfg.latent,
        heads=cfg.heads,
        sigma_s=tuple(cfg.sigmas),
        sigma_t=None if cfg.sigma_t is None else tuple(cfg.sigma_t),
        n_standard_layers=cfg.standard_layers,
        combine=cfg.combine,
    )


def cmd_train(args) -> int:
    cfg = RunConfig.resolve(args)
    registry = _load_registry(args.registry)
    graphs = _pipeline_graphs(args.detections, registry, cfg)
    train_set = load_qa(args.qa)
    val_set = load_qa(args.val) if args.val else None
    model_cfg = _model_config(cfg, graphs)
    if args.save_init:
        save_model(args.save_init, init_model(model_cfg, cfg.seed), seed=cfg.seed, step=0)
    model, metrics = train(
        train_set,
        graphs,
        model_cfg,
        TrainConfig(lr=cfg.lr, batch_size=cfg.batch),
        epochs=cfg.epochs,
        seed=cfg.seed,
        val_instances=val_set,
    )
    save_model(args.out, model, seed=cfg.seed, step=metrics["steps"])
    if args.metrics:
        _write_json(metrics, args.metrics)
    last = metrics["epochs"][-1] if metrics["epochs"] else {}
    summary = f"train_acc={last.get('train_accuracy', 0.0):.3f}"
    if "val_accuracy" in last:
        summary += f" val_acc={last['val_accuracy']:.3f}"
    print(f"trained {cfg.epochs} epochs ({metrics['steps']} steps): {summary}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.resolve(args)
    registry = _load_registry(args.registry)
    graphs = _pipeline_graphs(args.detections, registry, cfg, jobs=args.jobs)
    instances = load_qa(args.qa)
    model, _header = load_model(args.model)

    if args.jobs > 1:
        by_video: dict[str, list] = {}
        for inst in instances:
            by_video.setdefault(inst.video_id, []).append(inst)
        chunks = [by_video[v] for v in sorted(by_video)]
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda ch: evaluate(ch, graphs, model), chunks))
        n = sum(len(ch) for ch in chunks)
        accuracy = sum(r["accuracy"] * len(ch) for r, ch in zip(results, chunks)) / n
        mean_rank = sum(r["mean_rank"] * len(ch) for r, ch in zip(results, chunks)) / n
        result = {"accuracy": accuracy, "mean_rank": mean_rank}
    else:
        result = evaluate(instances, graphs, model)

    if args.out:
        _write_json({"format": METRICS_FORMAT, "version": METRICS_VERSION, **result}, args.out)
    print(f"accuracy={result['accuracy']:.4f} mean_rank={result['mean_rank']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_pipeline_flags(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--gamma", type=float, help="IoU merge threshold (artifact default 0.5)")
    p.add_argument("--delta", type=int, help="merge look-back window in frames (artifact default 3)")
    p.add_argument("--max-frames", dest="max_frames", type=int,
                   help="dataset-wide frame count for temporal normalization")
    p.add_argument("--image-w", dest="image_w", type=float, help="image width for default intrinsics")
    p.add_argument("--image-h", dest="image_h", type=float, help="image height for default intrinsics")
    p.add_argument("--fx", type=float, help="focal length x, pixels")
    p.add_argument("--fy", type=float, help="focal length y, pixels")
    p.add_argument("--cx", type=float, help="principal point x, pixels")
    p.add_argument("--cy", type=float, help="principal point y, pixels")


def _add_model_flags(p: _Parser) -> None:
    p.add_argument("--sigmas", type=_sigma_list,
                   help="spatial bandwidth hierarchy, comma-separated (reference default 0.01,0.1,1,10)")
    p.add_argument("--sigma-t", dest="sigma_t", type=_sigma_list,
                   help="temporal bandwidths (reference default: equal to --sigmas)")
    p.add_argument("--heads", type=int, help="attention heads (reference default 4)")
    p.add_argument("--latent", type=int, help="latent width r (artifact default 32)")
    p.add_argument("--vocab", type=int, help="token vocabulary size")
    p.add_argument("--standard-layers", dest="standard_layers", type=int,
                   help="stacked plain-attention blocks (artifact default 1)")
    p.add_argument("--no-combine", dest="no_combine", action="store_true",
                   help="condition on the hierarchical branch alone, skipping the standard-attention sum")


def build_parser() -> _Parser:
    parser = _Parser(prog="prism25d", description="(2.5+1)D scene-graph QA pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic worlds, detections, and QA")
    p.add_argument("--spec", required=True, help="world spec JSON (single object or {'worlds': [...]})")
    p.add_argument("--out-detections", dest="out_detections", required=True)
    p.add_argument("--out-qa", dest="out_qa")
    p.add_argument("--out-truth", dest="out_truth")
    p.add_argument("--out-registry", dest="out_registry")
    p.add_argument("--task", choices=sorted(synthworld.TASK_TOKENS), default="nearest_static")
    p.add_argument("--qa-per-world", dest="qa_per_world", type=int, default=4)
    p.add_argument("--qa-seed", dest="qa_seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load detections, lift to 3D, register frames")
    p.add_argument("--in", dest="inp", required=True, help="detection JSONL file")
    p.add_argument("--registry", required=True, help="class registry JSON")
    p.add_argument("--out", required=True, help="output graph file")
    p.add_argument("--no-register", dest="no_register", action="store_true",
                   help="skip frame registration")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("compact", help="merge redundant static nodes")
    p.add_argument("--in", dest="inp", required=True, help="graph file from ingest")
    p.add_argument("--out", required=True, help="output compacted graph file")
    p.add_argument("--stats", help="write node-count stats JSON here")
    p.add_argument("--jobs", type=int, default=1, help="videos compacted in parallel")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_compact)

    p = sub.add_parser("stats", help="node counts and reduction for a graph pair")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", help="write stats JSON here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="run the full pipeline and train the QA model")
    p.add_argument("--detections", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--qa", required=True, help="training QA JSONL")
    p.add_argument("--val", help="held-out QA JSONL evaluated each epoch")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--metrics", help="write per-epoch metrics JSON here")
    p.add_argument("--save-init", dest="save_init", help="also save the untrained checkpoint here")
    p.add_argument("--lr", type=float, help="Adam learning rate (artifact default 1e-3)")
    p.add_argument("--batch", type=int, help="batch size (artifact default 16)")
    p.add_argument("--epochs", type=int, help="training epochs (artifact default 25)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    _add_pipeline_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a QA dataset")
    p.add_argument("--detections", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--jobs", type=int, default=1, help="videos evaluated in parallel")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ParseError as exc:
        _emit_error("parse", exc)
        return 1
    except json.JSONDecodeError as exc:
        _emit_error("parse", exc)
        return 1
    except PrismError as exc:
        _emit_error("validation", exc)
        return 1
    except OSError as exc:
        _emit_error("io", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
