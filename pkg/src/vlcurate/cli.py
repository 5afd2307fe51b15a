"""Command-line front end: filter | score | calibrate | plan-tiles | schedule | report.

Settings come from an optional JSON config file (``--config``) and are
overridden by flags.  Every document written embeds the run-config snapshot
(minus the output directory) so reruns with equal inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .curriculum import (
    build_plan,
    emit_config,
    pack_batches,
    sample_pack_item,
    stage_samples,
)
from .errors import ConfigError, VlcurateError
from .filterbank import FilterConfig, run_pipeline
from .imagestats import image_size
from .manifest import (
    DatasetManifest,
    TaskCategory,
    categorize,
    load_manifest,
    load_sidecar,
    manifest_lines,
    merge_annotations,
    relocate,
)
from .scoring import (
    ComplexityReport,
    Oracles,
    RankedSubsets,
    calibrate_weights,
    load_weights_table,
    score_batch,
)
from .taskgap import DEFAULT_BETA, DEFAULT_DELTA, GapConfig
from .tileplan import SCHEMES, ResolutionConfig, compare_schemes, plan

logger = logging.getLogger("vlcurate")


@dataclass
class RunConfig:
    manifests: list[str] = field(default_factory=list)
    sidecars: list[str] = field(default_factory=list)
    filter: dict[str, Any] = field(default_factory=dict)
    weights: str | None = None
    label_map: dict[str, str] = field(default_factory=dict)
    beta: float = DEFAULT_BETA
    delta: float = DEFAULT_DELTA
    delta_on_raw_large_loss: bool = False
    norm: str = "minmax"
    caps: dict[str, float] = field(default_factory=dict)
    perplexity_oracle: str = "unigram"
    resolution: dict[str, Any] = field(default_factory=dict)
    scale: float = 1.0
    split_policy: str = "median"
    split_threshold: float | None = None
    seed: int = 0
    out: str = "out"

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        cfg = cls(**doc)
        base = path.parent
        if isinstance(cfg.filter, str):
            p = base / cfg.filter
            try:
                cfg.filter = json.loads(p.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read filter config {p}: {e}") from e
            base = p.parent
        bl = cfg.filter.get("blocklist_file")
        if bl is not None and not Path(bl).is_absolute():
            cfg.filter = {**cfg.filter, "blocklist_file": str(base / bl)}
        return cfg

    def snapshot(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("out")
        return d

    def gap_config(self) -> GapConfig:
        return GapConfig(self.beta, self.delta, self.delta_on_raw_large_loss)

    def resolution_config(self) -> ResolutionConfig:
        try:
            return ResolutionConfig(**self.resolution)
        except TypeError as e:
            raise ConfigError(f"bad resolution config: {e}") from e

    def filter_config(self) -> FilterConfig:
        return FilterConfig.from_dict(self.filter)

    def oracles(self) -> Oracles:
        if self.perplexity_oracle not in ("unigram", "none"):
            raise ConfigError(f"perplexity_oracle must be 'unigram' or 'none', got {self.perplexity_oracle!r}")
        return Oracles(unigram_fallback=self.perplexity_oracle == "unigram")


def _dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _safe_name(name: str) -> str:
    return name.replace("/", "__").replace("\\", "__")


def _write_outputs(files: dict[Path, str]) -> None:
    """Write all files, removing any already written if one fails."""
    written = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            written.append(path)
    except OSError:
        for p in written:
            p.unlink(missing_ok=True)
        raise


def _load_inputs(cfg: RunConfig, split: bool = True) -> list[DatasetManifest]:
    manifests = [load_manifest(p) for p in cfg.manifests]
    sidecar_records = [(p, load_sidecar(p)) for p in cfg.sidecars]
    matched: dict[str, set[str]] = {p: set() for p in cfg.sidecars}
    out = []
    for m in manifests:
        for p, records in sidecar_records:
            m, unmatched = merge_annotations(m, records)
            missed = set(unmatched)
            matched[p].update(sid for sid, _ in records if sid not in missed)
        out.append(m)
    for p, records in sidecar_records:
        orphans = [sid for sid, _ in records if sid not in matched[p]]
        if orphans:
            shown = ", ".join(repr(x) for x in orphans[:5]) + (", ..." if len(orphans) > 5 else "")
            logger.warning("sidecar %s: %d id(s) match no manifest: %s", p, len(orphans), shown)
    if not split:
        return out
    result = []
    for m in out:
        try:
            result.extend(categorize(m, cfg.label_map))
        except VlcurateError:
            if m.category is None and any(s.annotations.category is not None for s in m.samples):
                raise
            logger.warning("manifest %r has no category source; left uncategorized", m.name)
            result.append(m)
    return result


def _score(cfg: RunConfig, manifests: list[DatasetManifest]) -> list[ComplexityReport]:
    weights = load_weights_table(cfg.weights) if cfg.weights else {}
    return score_batch(
        manifests,
        weights=weights,
        gap_cfg=cfg.gap_config(),
        norm=cfg.norm,
        oracles=cfg.oracles(),
        caps=cfg.caps or None,
    )


def _report_doc(rep: ComplexityReport, cfg: RunConfig) -> dict[str, Any]:
    return {**rep.to_dict(), "run": cfg.snapshot()}


def _summary(reports: Sequence[ComplexityReport], cfg: RunConfig) -> dict[str, Any]:
    ranked = sorted(reports, key=lambda r: (-r.score, r.name))
    return {
        "datasets": [
            {"rank": i + 1, "name": r.name, "category": r.category.value if r.category else None, "S": r.score}
            for i, r in enumerate(ranked)
        ],
        "run": cfg.snapshot(),
    }


def markdown_table(reports: Sequence[ComplexityReport]) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    lines = [
        "| dataset | category | n | S_text | S_image | S_task | S |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in sorted(reports, key=lambda r: (-r.score, r.name)):
        a = r.axis_scores
        lines.append(
            f"| {r.name} | {r.category.value if r.category else '-'} | {r.n_samples} | "
            f"{fmt(a['S_text'])} | {fmt(a['S_image'])} | {fmt(a['S_task'])} | {fmt(r.score)} |"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_filter(cfg: RunConfig) -> int:
    fcfg = cfg.filter_config()
    out = Path(cfg.out) / "filter"
    files: dict[Path, str] = {}
    summary = []
    for m in _load_inputs(cfg, split=False):
        kept, report = run_pipeline(m, fcfg)
        stem = _safe_name(m.name)
        kept = relocate(kept, out)
        files[out / f"{stem}.jsonl"] = "\n".join(manifest_lines(kept)) + "\n"
        files[out / f"{stem}.report.json"] = _dumps({**report.to_dict(), "run": cfg.snapshot()})
        summary.append({"dataset": m.name, "total": report.total, "kept": report.kept, "rejected": report.rejected,
                        "rule_counts": report.rule_counts})
    files[out / "summary.json"] = _dumps({"datasets": summary, "run": cfg.snapshot()})
    _write_outputs(files)
    for s in summary:
        print(f"{s['dataset']}: kept {s['kept']}/{s['total']}")
    return 0


def cmd_score(cfg: RunConfig) -> int:
    reports = _score(cfg, _load_inputs(cfg))
    out = Path(cfg.out) / "score"
    files = {out / "reports" / f"{_safe_name(r.name)}.json": _dumps(_report_doc(r, cfg)) for r in reports}
    files[out / "summary.json"] = _dumps(_summary(reports, cfg))
    files[out / "summary.md"] = markdown_table(reports)
    _write_outputs(files)
    sys.stdout.write(markdown_table(reports))
    return 0


def cmd_calibrate(cfg: RunConfig, category: str, subsets: list[str], grid_step: float, margin: float) -> int:
    if len(subsets) != 5:
        raise ConfigError(f"calibration needs exactly 5 subset reports (easiest first), got {len(subsets)}")
    cat = TaskCategory.parse(category)
    reports = []
    for p in subsets:
        try:
            reports.append(ComplexityReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read subset report {p}: {e}") from e
    scores = []
    for r in reports:
        a = r.axis_scores
        if any(a[k] is None for k in ("S_text", "S_image", "S_task")):
            raise ConfigError(f"subset report {r.name!r} lacks an axis score; calibration needs all three")
        scores.append((a["S_text"], a["S_image"], a["S_task"]))
    ranked = RankedSubsets.in_order(cat, [f"{i}:{r.name}" for i, r in enumerate(reports)])
    result = calibrate_weights(ranked, scores, grid_step=grid_step, margin_threshold=margin)
    target = Path(cfg.weights) if cfg.weights else Path(cfg.out) / "weights.json"
    table: dict[str, Any] = {}
    if target.exists():
        try:
            table = json.loads(target.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse weights file {target}: {e}") from e
    table[cat.value] = {**result.to_dict(), "subsets": [r.name for r in reports], "run": cfg.snapshot()}
    _write_outputs({target: _dumps(table)})
    w = result.weights
    print(
        f"{cat.value}: lambda=({w.lambda_text:.2f}, {w.lambda_image:.2f}, {w.lambda_task:.2f}) "
        f"feasible={result.feasible} min_margin={result.min_margin:.6g} tau={result.kendall_tau:.3f}"
    )
    return 0


def _read_sizes(source: str) -> list[tuple[int, int]]:
    text = sys.stdin.read() if source == "-" else Path(source).read_text(encoding="utf-8")
    sizes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").replace("x", " ").split()
        try:
            w, h = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: expected 'width height', got {line!r}") from None
        if w < 1 or h < 1:
            raise ConfigError(f"{source}:{lineno}: dimensions must be >= 1")
        sizes.append((w, h))
    return sizes


def tile_budget_doc(sizes: Sequence[tuple[int, int]], res: ResolutionConfig, schemes: Sequence[str]) -> dict[str, Any]:
    rows = []
    totals = {s: 0 for s in schemes}
    for w, h in sizes:
        budgets = {s: compare_schemes(w, h, res, s).to_dict() for s in schemes}
        for s in schemes:
            totals[s] += budgets[s]["tokens"]
        rows.append({"size": [w, h], "schemes": budgets})
    doc: dict[str, Any] = {"images": rows, "totals": totals, "resolution": res.to_dict()}
    if "nearest_cell" in schemes and "fixed_multiple_grid" in schemes and totals["fixed_multiple_grid"]:
        doc["token_ratio_nearest_cell_vs_fixed_multiple_grid"] = totals["nearest_cell"] / totals["fixed_multiple_grid"]
    return doc


def tile_budget_table(doc: dict[str, Any], schemes: Sequence[str]) -> str:
    lines = ["| width | height | " + " | ".join(schemes) + " |", "|---|---|" + "---|" * len(schemes)]
    for row in doc["images"]:
        w, h = row["size"]
        lines.append(f"| {w} | {h} | " + " | ".join(str(row["schemes"][s]["tokens"]) for s in schemes) + " |")
    if doc["images"]:
        lines.append("| total | | " + " | ".join(str(doc["totals"][s]) for s in schemes) + " |")
    return "\n".join(lines) + "\n"


def cmd_plan_tiles(cfg: RunConfig, size: list[int] | None, batch: str | None, schemes: list[str], fmt: str,
                   mask: bool) -> int:
    res = cfg.resolution_config()
    schemes = schemes or list(SCHEMES)
    if size:
        w, h = size
        doc: dict[str, Any] = {
            "plan": plan(w, h, res).to_dict(include_mask=mask),
            "budgets": {s: compare_schemes(w, h, res, s).to_dict() for s in schemes},
            "resolution": res.to_dict(),
        }
        sys.stdout.write(_dumps(doc))
        return 0
    doc = tile_budget_doc(_read_sizes(batch or "-"), res, schemes)
    sys.stdout.write(tile_budget_table(doc, schemes) if fmt == "table" else _dumps(doc))
    return 0


def cmd_schedule(cfg: RunConfig) -> int:
    manifests = _load_inputs(cfg)
    reports = _score(cfg, manifests)
    caption = [r for r in reports if r.category == TaskCategory.CAPTION]
    if not caption:
        raise VlcurateError("schedule needs at least one caption-category dataset for stages 1-2")
    res = cfg.resolution_config()
    plan_ = build_plan(
        caption,
        reports,
        scale_factor=cfg.scale,
        policy=cfg.split_policy,
        threshold=cfg.split_threshold,
        seed=cfg.seed,
        metadata={"run": cfg.snapshot()},
    )
    by_name = {m.name: m for m in manifests}
    out = Path(cfg.out) / "schedule"
    files: dict[Path, str] = {out / "training_config.json": emit_config(plan_)}
    files[out / "reports.json"] = _dumps({"reports": [r.to_dict() for r in reports], "run": cfg.snapshot()})
    for stage in plan_.stages:
        items = []
        for ds, s in stage_samples(stage, by_name, cfg.seed):
            wh = image_size(s, ds) if s.has_image else None
            items.append(sample_pack_item(s, wh, res))
        packs = pack_batches(items, plan_.max_pack_tokens, plan_.max_pack_images)
        lines = [json.dumps({"stage": stage.index, "seed": cfg.seed}, sort_keys=True)]
        lines += [
            json.dumps({"ids": list(p.ids), "total_tokens": p.total_tokens, "total_images": p.total_images},
                       ensure_ascii=False)
            for p in packs
        ]
        files[out / f"stage{stage.index}_packs.jsonl"] = "\n".join(lines) + "\n"
        print(f"stage {stage.index} {stage.name}: budget {stage.sample_budget}, "
              f"{len(stage.datasets)} dataset(s), {len(packs)} pack(s)")
    _write_outputs(files)
    return 0


def cmd_report(paths: list[str], out: str | None) -> int:
    reports = []
    for p in paths:
        try:
            reports.append(ComplexityReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read report {p}: {e}") from e
    text = markdown_table(reports)
    if out:
        _write_outputs({Path(out): text})
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlcurate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--manifest", action="append", dest="manifests", help="manifest file (repeatable)")
    common.add_argument("--sidecar", action="append", dest="sidecars", help="annotation sidecar (repeatable)")
    common.add_argument("--weights", help="per-category weights file")
    common.add_argument("--beta", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--norm", choices=["minmax", "fixed"])
    common.add_argument("--scale", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("filter", parents=[common], help="run the data-filtering pipeline")
    sub.add_parser("score", parents=[common], help="compute complexity reports")
    c = sub.add_parser("calibrate", parents=[common], help="grid-search category weights")
    c.add_argument("--category", required=True)
    c.add_argument("--subset", action="append", default=[], help="subset report JSON, easiest first (x5)")
    c.add_argument("--grid-step", type=float, default=0.05)
    c.add_argument("--min-margin", type=float, default=0.0, help="margin required to mark the result accepted")
    t = sub.add_parser("plan-tiles", parents=[common], help="tile plans and visual-token budgets")
    t.add_argument("--size", nargs=2, type=int, metavar=("W", "H"))
    t.add_argument("--batch", help="file of 'width height' lines, '-' for stdin (default)")
    t.add_argument("--scheme", action="append", choices=SCHEMES, default=[])
    t.add_argument("--format", choices=["json", "table"], default="json")
    t.add_argument("--mask", action="store_true", help="include the attention mask in --size output")
    t.add_argument("--pad-up-only", action="store_true", help="ceil to the next token-cell multiple")
    t.add_argument("--thumbnail", action="store_true", help="add a thumbnail tile to fixed_multiple_grid")
    sub.add_parser("schedule", parents=[common], help="build the curriculum plan and packed batches")
    r = sub.add_parser("report", help="render complexity reports as a markdown table")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out")
    return p


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("manifests", "sidecars"):
        if getattr(args, name):
            setattr(cfg, name, list(getattr(args, name)))
    for name in ("weights", "beta", "delta", "norm", "scale", "seed", "out"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "pad_up_only", False):
        cfg.resolution = {**cfg.resolution, "pad_up_only": True}
    if getattr(args, "thumbnail", False):
        cfg.resolution = {**cfg.resolution, "thumbnail": True}
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            return cmd_report(args.reports, args.out)
        cfg = _run_config(args)
        if args.command in ("filter", "score", "schedule"):
            if not cfg.manifests:
                parser.error(f"{args.command}: at least one --manifest is required")
            missing = [p for p in cfg.manifests + cfg.sidecars if not Path(p).exists()]
            if missing:
                parser.error(f"{args.command}: no such file: {', '.join(missing)}")
        if args.command == "filter":
            return cmd_filter(cfg)
        if args.command == "score":
            return cmd_score(cfg)
        if args.command == "schedule":
            return cmd_schedule(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args.category, args.subset, args.grid_step, args.min_margin)
        if args.command == "plan-tiles":
            return cmd_plan_tiles(cfg, args.size, args.batch, args.scheme, args.format, args.mask)
    except (VlcurateError, ValueError, OSError) as e:
        logger.error("%s", e)
        return 1
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
