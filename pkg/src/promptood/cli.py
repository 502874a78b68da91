"""Command-line entry point for the whole pipeline.

Subcommands: synth, gen-queries, build-prompts, optimize-adapters,
build-graphs, train-vig, score, eval, gradcheck. Exit codes: 0 success,
1 validation error, 2 I/O error. Every subcommand is deterministic for a
fixed seed, so rerunning with identical inputs reproduces outputs byte for
byte.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import detect as detect_mod
from . import gradcheck as gradcheck_mod
from . import vig as vig_mod
from .config import RunConfig, load_config
from .errors import EngineError, FormatError
from .graph import build_graph
from .prompts import (
    PromptBank,
    SuperClassPartition,
    build_prompts,
    emit_query_file,
    ingest_features,
    load_features,
    load_prompt_bank,
    synth_prompt_table,
    write_prompt_bank,
)
from .store import (
    EmbeddingTable,
    Modality,
    SynthSpec,
    load_table,
    save_table,
    synth_dataset,
)


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="promptood", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--patches", type=int, default=1)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--partition", type=Path, default=None,
                   help="also emit a synthetic prompt table for this partition")
    p.add_argument("--n-features", type=int, default=3)
    p.add_argument("--prompt-spread", type=float, default=0.05)

    p = sub.add_parser("gen-queries", help="emit the feature-elicitation queries")
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("build-prompts", help="build the indexed prompt bank")
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--n-features", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("optimize-adapters", help="train the text/image adapters")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path, default=None)

    p = sub.add_parser("build-graphs", help="dump per-sample multi-modal graphs")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--adapters", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("train-vig", help="train the graph network on ID graphs")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--adapters", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path, default=None)

    p = sub.add_parser("score", help="score a test table for OOD detection")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--adapters", type=Path, required=True)
    p.add_argument("--vig", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--is-id", type=int, choices=(0, 1), required=True)
    p.add_argument("--score-mode", choices=("energy", "mcm"), default="energy")
    p.add_argument("--stage1", choices=("patch-mean", "global"), default="patch-mean")
    p.add_argument("--images", type=Path, default=None,
                   help="ImageGlobal table, required for --stage1 global")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="compute OOD metrics from score CSVs")
    p.add_argument("--id", dest="id_csv", type=Path, required=True)
    p.add_argument("--ood", dest="ood_csv", type=Path, required=True)
    p.add_argument("--id-labels", type=Path, default=None,
                   help="PEMB table supplying ground-truth ID labels by name")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--trials", type=int, default=20)

    return parser


def _load_bank(bank_path: Path, partition_path: Path) -> PromptBank:
    partition = SuperClassPartition.from_json(partition_path)
    return load_prompt_bank(bank_path, partition)


def _prompt_reps(
    prompts_path: Path, bank: PromptBank, state: adapter_mod.AdapterState
) -> adapter_mod.PromptReps:
    prompt_table = load_table(prompts_path)
    raw = adapter_mod.raw_prompt_blocks(prompt_table, bank)
    return adapter_mod.transform_prompt_reps(state, raw, bank)


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        dim=args.dim,
        patches_per_image=args.patches,
        cluster_spread=args.spread,
        seed=args.seed,
    )
    images, patches, means = synth_dataset(spec)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_table(images, args.out_dir / "images.pemb")
    save_table(patches, args.out_dir / "patches.pemb")
    save_table(means, args.out_dir / "means.pemb")

    if args.partition is not None:
        partition = SuperClassPartition.from_json(args.partition)
        categories = partition.categories()
        if len(categories) != args.classes:
            raise FormatError(
                f"partition lists {len(categories)} categories but --classes is {args.classes}"
            )
        features = {
            c: [f"synthetic trait {n + 1} of {c}" for n in range(args.n_features)]
            for c in categories
        }
        bank = build_prompts(ingest_features(features, args.n_features), partition)
        write_prompt_bank(bank, args.out_dir / "prompt_bank.json")
        prompt_table = synth_prompt_table(
            bank, means, spread=args.prompt_spread, seed=args.seed
        )
        save_table(prompt_table, args.out_dir / "prompts.pemb")
    return 0


def _cmd_gen_queries(args) -> int:
    partition = SuperClassPartition.from_json(args.partition)
    text = emit_query_file(partition)
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text, encoding="utf-8")
    return 0


def _cmd_build_prompts(args) -> int:
    partition = SuperClassPartition.from_json(args.partition)
    features = load_features(args.features, args.n_features)
    bank = build_prompts(features, partition)
    write_prompt_bank(bank, args.out)
    return 0


def _cmd_optimize_adapters(args) -> int:
    cfg = load_config(args.config)
    bank = _load_bank(args.bank, args.partition)
    images = load_table(args.images)
    prompt_table = load_table(args.prompts)
    state, trace = adapter_mod.optimize_adapters(
        images, prompt_table, bank, cfg.loss_weights(), cfg.adapter_settings()
    )
    adapter_mod.save_adapter_state(state, args.out)
    if args.trace is not None:
        args.trace.write_text(adapter_mod.format_loss_trace(trace), encoding="utf-8")
    return 0


def _graphs_for_table(
    patch_table: EmbeddingTable,
    reps: adapter_mod.PromptReps,
    state: adapter_mod.AdapterState,
    cfg: RunConfig,
):
    """Yield (record, category, graph) per patch-set record.

    Labeled records use their label's prompt block; unlabeled (label < 0)
    fall back to the stage-1 predicted category.
    """
    categories = reps.categories
    for rec in patch_table.select(Modality.IMAGE_PATCH_SET):
        raw_patches = rec.vectors.astype(np.float64)
        if 0 <= rec.label < len(categories):
            category = categories[rec.label]
        else:
            rep = detect_mod.stage1_image_rep(state, raw_patches)
            probs = adapter_mod.positive_probabilities(rep, reps, cfg.tau)
            category = categories[int(np.argmax(probs))]
        transformed = adapter_mod.transform_images(state, raw_patches)
        graph = build_graph(transformed, reps.block(category), cfg.topk())
        yield rec, category, graph


def _cmd_build_graphs(args) -> int:
    cfg = load_config(args.config)
    bank = _load_bank(args.bank, args.partition)
    state = adapter_mod.load_adapter_state(args.adapters)
    reps = _prompt_reps(args.prompts, bank, state)
    patch_table = load_table(args.patches)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for rec, category, graph in _graphs_for_table(patch_table, reps, state, cfg):
        payload = graph.to_json_dict()
        payload["sample"] = rec.name
        payload["category_block"] = category
        out = args.out_dir / (rec.name.replace("/", "_") + ".graph.json")
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_train_vig(args) -> int:
    cfg = load_config(args.config)
    bank = _load_bank(args.bank, args.partition)
    state = adapter_mod.load_adapter_state(args.adapters)
    reps = _prompt_reps(args.prompts, bank, state)
    patch_table = load_table(args.patches)

    graphs = []
    labels = []
    for rec, _, graph in _graphs_for_table(patch_table, reps, state, cfg):
        if not 0 <= rec.label < len(reps.categories):
            raise FormatError(f"training record {rec.name!r} has label {rec.label}")
        graphs.append(graph)
        labels.append(rec.label)

    model = vig_mod.init_vig(
        dim=patch_table.dim,
        hidden_dim=cfg.hidden_dim_for(patch_table.dim),
        num_layers=cfg.vig_layers,
        num_classes=len(reps.categories),
        seed=cfg.seed,
    )
    model, trace = vig_mod.train_vig(graphs, labels, model, cfg.energy(), cfg.vig_settings())
    vig_mod.save_vig_model(model, args.out)
    if args.trace is not None:
        args.trace.write_text(vig_mod.format_vig_trace(trace), encoding="utf-8")
    return 0


def _cmd_score(args) -> int:
    cfg = load_config(args.config)
    bank = _load_bank(args.bank, args.partition)
    state = adapter_mod.load_adapter_state(args.adapters)
    reps = _prompt_reps(args.prompts, bank, state)
    model = vig_mod.load_vig_model(args.vig)
    patch_table = load_table(args.patches)
    image_table = load_table(args.images) if args.images is not None else None
    if args.stage1 == "global" and image_table is None:
        raise FormatError("--stage1 global needs --images")
    records = detect_mod.score_table(
        patch_table,
        reps,
        state,
        model,
        cfg.topk(),
        cfg.energy(),
        tau=cfg.tau,
        is_id=bool(args.is_id),
        pooling=cfg.pooling,
        stage1_mode=args.stage1,
        image_table=image_table,
        score_mode=args.score_mode,
    )
    args.out.write_text(detect_mod.export_scores(records), encoding="utf-8")
    return 0


def _cmd_eval(args) -> int:
    id_records = detect_mod.parse_scores(args.id_csv.read_text(encoding="utf-8"))
    ood_records = detect_mod.parse_scores(args.ood_csv.read_text(encoding="utf-8"))
    labels = None
    if args.id_labels is not None:
        table = load_table(args.id_labels)
        labels = {rec.name: rec.label for rec in table.records}
    report = detect_mod.compute_report(id_records, ood_records, labels)
    sys.stdout.write(report.to_json())
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(seed=args.seed, trials=args.trials)
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 1


_HANDLERS = {
    "synth": _cmd_synth,
    "gen-queries": _cmd_gen_queries,
    "build-prompts": _cmd_build_prompts,
    "optimize-adapters": _cmd_optimize_adapters,
    "build-graphs": _cmd_build_graphs,
    "train-vig": _cmd_train_vig,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv: list[str]) -> int:
    args = _build_parser().parse_args(argv)
    return _HANDLERS[args.command](args)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return dispatch(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        # malformed input files (bad JSON, wrong field types) must not panic
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
