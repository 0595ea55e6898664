"""``ovdet`` command suite: synth, split, pretrain, finetune, predict, eval, attrgen, benchmark."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import attribgen, datakit, evalkit, pipeline, taxonomy


@dataclass
class CommandOutcome:
    exit_code: int = 0
    artifacts: list[str] = field(default_factory=list)
    summary: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"exit_code": self.exit_code, "artifacts": self.artifacts, "summary": self.summary}


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _protocol(text: str) -> taxonomy.Protocol:
    try:
        return taxonomy.Protocol.parse(text)
    except taxonomy.TaxonomyError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _names_arg(text: str) -> list[str]:
    """Comma list, or @file with one name per line."""
    if text.startswith("@"):
        return [ln.strip() for ln in Path(text[1:]).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return _csv(text)


# --------------------------------------------------------------------------
# commands


def cmd_synth(a) -> CommandOutcome:
    unknown = [c for c in a.colors if c not in datakit.ALL_COLORS]
    if unknown:
        return CommandOutcome(2, [], [f"error: unknown colour(s) {unknown}; known: {sorted(datakit.ALL_COLORS)}"])
    cfg = datakit.SynthConfig(
        colors={c: datakit.ALL_COLORS[c] for c in a.colors},
        shapes=tuple(a.shapes),
        images_per_category=a.images_per_category,
        image_size=a.image_size,
        objects_per_image=(a.min_objects, a.max_objects),
        distractor_rate=a.distractor_rate,
        noise_std=a.noise_std,
        background=a.background,
        exclude=tuple(a.exclude),
        seed=a.seed,
    )
    out, index, reg = datakit.gen_synthetic(cfg, a.out)
    stats = datakit.dataset_stats(index)
    arts = [str(out / n) for n in ("annotations.json", "taxonomy.json", "manifest.json")]
    return CommandOutcome(0, arts, [f"{stats.categories} categories, {stats.images} images, {stats.boxes} boxes, {len(reg.classes)} classes -> {out}"])


def cmd_split(a) -> CommandOutcome:
    reg = taxonomy.load_taxonomy(a.taxonomy)
    params = taxonomy.SplitParams(seen_classes=a.seen_classes, block=a.block, unseen_categories=a.unseen_categories)
    split = taxonomy.gen_split(reg, a.protocol, params, a.seed)
    report = taxonomy.validate_split(split, reg)
    split.save(a.out)
    unit = "classes" if split.class_level else "categories"
    lines = [f"{split.protocol.value}: {len(split.seen)} seen / {len(split.unseen)} unseen {unit} -> {a.out}", *report.lines()]
    return CommandOutcome(0 if report.ok else 1, [str(a.out)], lines)


def _run_config(a) -> pipeline.RunConfig:
    raw = json.loads(Path(a.config).read_text(encoding="utf-8"))
    over = {}
    over["phase"] = a.phase
    if a.max_steps is not None:
        over["max_steps"] = a.max_steps
    if a.output_dir is not None:
        over["output_dir"] = a.output_dir
    if a.seed is not None:
        over["seed"] = a.seed
    if a.resume:
        over["resume"] = True
    if getattr(a, "checkpoint", None):
        over["checkpoint_in"] = a.checkpoint
    if getattr(a, "from_scratch", False):
        over["from_scratch_ablation"] = True
    return pipeline.RunConfig.from_json({**raw, **over})


def _run_outcome(ckpt: Path) -> CommandOutcome:
    out = ckpt.parent
    arts = [str(ckpt), str(out / "metrics.jsonl")]
    if (out / "vocab_audit.json").exists():
        arts.append(str(out / "vocab_audit.json"))
    recs = pipeline.read_metrics(out / "metrics.jsonl")
    last = f"final total loss {recs[-1]['total']:.4f} at step {recs[-1]['step']}" if recs else "no steps run"
    return CommandOutcome(0, arts, [f"checkpoint {ckpt}", last])


def cmd_pretrain(a) -> CommandOutcome:
    a.phase = pipeline.Phase.PRETRAIN.value
    cfg = _run_config(a)
    return _run_outcome(pipeline.run_pretrain(cfg))


def cmd_finetune(a) -> CommandOutcome:
    a.phase = pipeline.Phase.FINETUNE.value
    return _run_outcome(pipeline.run_finetune(_run_config(a)))


def _vocabulary(a) -> list[str]:
    if a.categories:
        return a.categories
    if a.split:
        split = taxonomy.SplitSpec.load(a.split)
        reg = taxonomy.load_taxonomy(a.taxonomy) if a.taxonomy else None
        if reg is not None:
            return split.seen_categories(reg) + split.unseen_categories(reg)
        return sorted(split.seen) + sorted(split.unseen)
    return []


def cmd_predict(a) -> CommandOutcome:
    vocab = _vocabulary(a)
    ckpt = pipeline.load_checkpoint(a.checkpoint)
    vocab = vocab or list(ckpt.meta.get("bank_categories") or [])
    if not vocab:
        return CommandOutcome(2, [], ["error: no vocabulary; pass --categories or --split"])
    path = pipeline.run_predict(a.checkpoint, a.annotations, vocab, a.out)
    return CommandOutcome(0, [str(path)], [f"{len(evalkit.load_results(path))} detections over {len(vocab)} categories -> {path}"])


def cmd_eval(a) -> CommandOutcome:
    split = taxonomy.SplitSpec.load(a.split)
    reg = taxonomy.load_taxonomy(a.taxonomy) if a.taxonomy else None
    index = datakit.load_annotations(a.annotations)
    dets = evalkit.load_results(a.results)
    res = evalkit.evaluate(dets, index, split, reg, a.iou, "coco101" if a.coco101 else "all")
    arts, lines = [], [
        f"mAP50 seen {_pct(res.map50_seen)} unseen {_pct(res.map50_unseen)} all {_pct(res.map50_all)} ({res.protocol})"
    ]
    if a.out:
        Path(a.out).write_text(res.dumps(), encoding="utf-8")
        arts.append(str(a.out))
    if a.table:
        seen_cols = res.seen_groups if a.group_columns else []
        unseen_cols = res.unseen_groups if a.group_columns else []
        lines.extend(evalkit.render_table([(a.method, res)], seen_cols, unseen_cols).rstrip("\n").splitlines())
    if a.plot:
        cats = sorted(res.per_category_ap)
        arts.extend(str(p) for p in evalkit.plot_pr_curves(dets, index, cats, a.plot, a.iou))
    code = 0
    if res.stray_categories:
        lines.append(f"stray categories: {res.stray_categories}")
        if a.strict:
            code = 1
    return CommandOutcome(code, arts, lines)


def cmd_attrgen(a) -> CommandOutcome:
    template = Path(a.template_file).read_text(encoding="utf-8") if a.template_file else a.template
    model = a.model
    names = []
    if a.fixture:
        model = model or attribgen.FIXTURE_MODEL
        names = attribgen.install_fixture(a.cache, template, model)
    model = model or "gpt-4"
    if a.names:
        names = [ln.strip() for ln in Path(a.names).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        return CommandOutcome(2, [], ["error: no names; pass a names file or --fixture"])
    lines = []
    if a.dedup:
        names, dropped = attribgen.dedup_names(names)
        if dropped:
            lines.append(f"dedup dropped {len(dropped)} case-duplicate(s), flagged for review: {dropped}")
    req = attribgen.AttributeRequest(tuple(names), template, model, a.cache, a.mode)
    responses = attribgen.generate_attributes(req, concurrency=a.concurrency)
    reg = attribgen.to_taxonomy(responses, a.out)
    tally = {s.value: sum(r.status is s for r in responses) for s in attribgen.ParseStatus}
    lines.insert(0, f"{len(responses)} names: " + ", ".join(f"{k} {v}" for k, v in tally.items()) + f"; {len(reg.classes)} classes -> {a.out}")
    return CommandOutcome(0, [str(a.out)], lines)


def cmd_benchmark(a) -> CommandOutcome:
    from .benchmark import Benchmark, BenchmarkConfig, summary_line

    kw = {k: json.loads(v) for k, v in (s.split("=", 1) for s in a.set)}
    b = Benchmark(Path(a.root), BenchmarkConfig(**kw)).prepare()
    ckpt = b.finetune(a.kind, a.seed, a.from_scratch)
    res = b.evaluate(ckpt)
    tag = "scratch" if a.from_scratch else "pretrained"
    return CommandOutcome(0, [str(ckpt), str(ckpt.parent / "metrics.json")], [f"{a.kind} seed {a.seed} {tag}: {summary_line(res)}"])


def _pct(v) -> str:
    return evalkit._cell(v)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovdet", description="Open-vocabulary detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--json", action="store_true", help="print a machine-readable summary")
        sp.set_defaults(fn=fn)
        return sp

    s = add("synth", cmd_synth, "Render a colour x shape synthetic detection dataset.")
    s.add_argument("--out", required=True, type=Path, help="output directory (its parent must exist)")
    s.add_argument("--colors", type=_csv, default=list(datakit.DEFAULT_COLORS), help="comma-separated colour names")
    s.add_argument("--shapes", type=_csv, default=["circle", "square", "triangle"], help="comma-separated shape names")
    s.add_argument("--images-per-category", type=int, default=12, help="images per composition (>= 10)")
    s.add_argument("--image-size", type=int, default=64, help="square image side in pixels")
    s.add_argument("--min-objects", type=int, default=1, help="fewest annotated shapes per image")
    s.add_argument("--max-objects", type=int, default=2, help="most annotated shapes per image")
    s.add_argument("--distractor-rate", type=float, default=0.3, help="chance of an unannotated distractor")
    s.add_argument("--noise-std", type=float, default=6.0, help="pixel noise standard deviation")
    s.add_argument("--background", choices=["textured", "plain"], default="textured", help="background style")
    s.add_argument("--exclude", type=_csv, default=[], help="compositions to leave out, comma-separated")
    s.add_argument("--seed", type=int, default=0, help="generator seed")

    s = add("split", cmd_split, "Generate and validate a seen/unseen split.")
    s.add_argument("--taxonomy", required=True, type=Path, help="taxonomy record file")
    s.add_argument("--protocol", required=True, type=_protocol, help="IntraClass, InterClass, ClassLevel, FullySupervised or HeldOut")
    s.add_argument("--seen-classes", type=_names_arg, default=None, help="seen Class names: comma list or @file")
    s.add_argument("--unseen-categories", type=_names_arg, default=None, help="HeldOut categories: comma list or @file")
    s.add_argument("--block", type=int, default=4, help="InterClass: every block-th sorted category is unseen")
    s.add_argument("--seed", type=int, default=0, help="recorded in the split file")
    s.add_argument("--out", required=True, type=Path, help="split file to write")

    for name, fn, help_ in (
        ("pretrain", cmd_pretrain, "Run region/image contrastive pre-training from a config file."),
        ("finetune", cmd_finetune, "Fine-tune on seen categories with the frozen prototype classifier."),
    ):
        s = add(name, fn, help_)
        s.add_argument("--config", required=True, type=Path, help="run config JSON")
        s.add_argument("--max-steps", type=int, default=None, help="override max_steps")
        s.add_argument("--output-dir", default=None, help="override output_dir")
        s.add_argument("--seed", type=int, default=None, help="override seed")
        s.add_argument("--resume", action="store_true", help="continue from checkpoint_in at its step")
        if name == "finetune":
            s.add_argument("--checkpoint", default=None, help="override checkpoint_in")
            s.add_argument("--from-scratch", action="store_true", help="allow no checkpoint (ablation)")

    s = add("predict", cmd_predict, "Write detections for an annotation file with any vocabulary.")
    s.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    s.add_argument("--annotations", required=True, help="annotation file listing the images")
    s.add_argument("--categories", type=_names_arg, default=None, help="vocabulary: comma list or @file")
    s.add_argument("--split", default=None, help="use seen + unseen of this split as the vocabulary")
    s.add_argument("--taxonomy", default=None, help="taxonomy for expanding a ClassLevel split")
    s.add_argument("--out", required=True, type=Path, help="detection results JSON to write")

    s = add("eval", cmd_eval, "Score a detection results file (mAP50, seen/unseen).")
    s.add_argument("--results", required=True, help="detection results JSON")
    s.add_argument("--annotations", required=True, help="ground-truth annotation file")
    s.add_argument("--split", required=True, help="split file")
    s.add_argument("--taxonomy", default=None, help="taxonomy file (needed for ClassLevel)")
    s.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    s.add_argument("--coco101", action="store_true", help="101-point interpolation instead of all-point")
    s.add_argument("--table", action="store_true", help="render the seen/unseen table")
    s.add_argument("--group-columns", action="store_true", help="add one table column per seen/unseen group")
    s.add_argument("--method", default="Ours", help="row label in the table")
    s.add_argument("--plot", default=None, type=Path, help="directory for per-category PR curve images")
    s.add_argument("--strict", action="store_true", help="exit nonzero when stray categories are present")
    s.add_argument("--out", default=None, type=Path, help="write the EvalResult JSON here")

    s = add("attrgen", cmd_attrgen, "Generate taxonomy records for category names with an LLM (Live) or cache (Replay).")
    s.add_argument("names", nargs="?", default=None, help="file with one category name per line")
    s.add_argument("--mode", choices=["live", "replay"], default="replay", help="query the service or replay the cache")
    s.add_argument("--cache", default=".attrgen_cache", help="response cache directory")
    s.add_argument("--model", default=None, help="model id sent to the service")
    s.add_argument("--template", default=attribgen.DEFAULT_TEMPLATE, help="instruction template with one {name} slot")
    s.add_argument("--template-file", default=None, help="read the instruction template from a file")
    s.add_argument("--fixture", action="store_true", help="seed the cache with the bundled marine fixture (and use its names)")
    s.add_argument("--dedup", action="store_true", help="drop case-insensitive duplicate names")
    s.add_argument("--concurrency", type=int, default=4, help="parallel Live requests")
    s.add_argument("--out", required=True, type=Path, help="taxonomy record file to write")

    s = add("benchmark", cmd_benchmark, "Run one arm of the synthetic held-out-composition benchmark.")
    s.add_argument("root", help="benchmark working directory")
    s.add_argument("--kind", default="Compositional", choices=["Compositional", "Hashed"], help="text encoder")
    s.add_argument("--seed", type=int, default=0, help="training seed")
    s.add_argument("--from-scratch", action="store_true", help="skip pre-training (ablation arm)")
    s.add_argument("--set", nargs="*", default=[], metavar="KEY=JSON", help="benchmark config overrides")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        outcome = a.fn(a)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        outcome = CommandOutcome(1, [], [f"error: {exc}"])
    if a.json:
        print(json.dumps(outcome.to_json(), indent=1))
    else:
        stream = sys.stderr if outcome.exit_code else sys.stdout
        for line in outcome.summary:
            print(line, file=stream)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
