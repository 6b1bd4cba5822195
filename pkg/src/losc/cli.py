"""Command-line entry point: one subcommand per stage plus ``synth`` and ``pipeline``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io, report
from .core import ConfigError, FormatError, MalformedPoseError
from .dataset import read_labeling_meta, read_panoptic, write_labelings
from .pipeline import PipelineConfig, Run, run_pipeline, write_rounds

log = logging.getLogger("losc")

# flag -> config field
_OVERRIDES = {
    "voxel_size": float, "depth_tolerance": float, "N": int, "tau": float, "rounds": int,
    "window_length": int, "panoptic_k": int, "panoptic_radius": float, "knn_k": int,
    "knn_max_reference_points": int, "seed": int, "workers": int,
}


def _add_config_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="pipeline config JSON")
    for name, typ in _OVERRIDES.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--weighted-vote", dest="weighted_vote", action="store_const", const=True, default=None)
    g.add_argument("--eval-mode", dest="eval_mode", choices=["unlabeled-as-error", "unlabeled-excluded"])


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    over = {k: getattr(args, k, None) for k in [*_OVERRIDES, "weighted_vote", "eval_mode"]}
    return cfg.override(**over)


def _run(args) -> Run:
    return Run(args.manifest, _config(args))


def _done(payload: dict):
    print(json.dumps(payload, indent=2))


def cmd_synth(args):
    from .synth import CorpusSpec, NoiseModel, SceneSpec, generate_corpus, write_dataset

    scene = SceneSpec(n_scans=args.scans, points_per_scan=args.points)
    if args.zero_noise:
        shared = variant = NoiseModel()
    else:
        shared = NoiseModel(flip_rate=args.flip, drop_rate=args.drop, boundary_width=args.boundary, independent=False)
        variant = NoiseModel(flip_rate=args.variant_flip, drop_rate=args.variant_drop)
    spec = CorpusSpec(args.sequences, scene, shared, variant, seed=args.seed)
    manifest = write_dataset(args.out, generate_corpus(spec), spec)
    _done({"manifest": str(manifest)})


def cmd_backproject(args):
    run = _run(args)
    written = write_labelings(args.out, run.backproject(), run.ds)
    _done({"provenance": "vlm", "out": str(args.out), "files": len(written)})


def cmd_tbc(args):
    run = _run(args)
    labs = run.read(args.labels)
    out = run.tbc(labs)
    write_labelings(args.out, out, run.ds)
    _done({"provenance": "tim", "out": str(args.out)})


def cmd_abc(args):
    run = _run(args)
    l_abc, l_aug = run.abc()
    write_labelings(args.out, l_aug, run.ds)
    if args.abc_out:
        write_labelings(args.abc_out, l_abc, run.ds)
    _done({"provenance": "aug", "out": str(args.out)})


def cmd_combine(args):
    run = _run(args)
    l_aug = run.read(args.aug, "aug")
    l_tim = run.read(args.tim, "tim")
    atc, robust = run.combine(l_aug, l_tim)
    out = Path(args.out)
    write_labelings(out, atc, run.ds)
    io.write_json(out / "robustness.json", robust.to_json())
    (out / "robustness.txt").write_text(report.robustness_table(robust))
    report.write_csv(out / "robustness.csv", ["class", "N_aug", "N_tim", "N_aug/N_tim", "robust"],
                     report.robustness_rows(robust))
    print(report.robustness_table(robust), file=sys.stderr)
    _done({"provenance": "atc", "out": str(out), "robust": sorted(r.name for r in robust.rows if r.robust)})


def cmd_iterate(args):
    run = _run(args)
    initial = run.read(args.labels)
    gt = run.gt_words() if run.ds.has_gt() else None
    evaluate = (lambda p: run.evaluate(p, gt)) if gt else None
    records = run.iterate(initial, evaluate=evaluate, emit=lambda n, p: write_rounds(run, args.out, n, p))
    rounds = {f"round-{r.round_index}": r.metrics for r in records if r.metrics is not None}
    if rounds:
        io.write_json(Path(args.out) / "rounds.json", {"schema": "losc.metrics/1", "stages": rounds})
    _done({"rounds": len(records), "out": str(args.out)})


def cmd_panoptic(args):
    run = _run(args)
    labs = run.read(args.labels)
    words = run.panoptic(labs)
    prov = next(iter(labs.values())).provenance
    write_labelings(args.out, words, run.ds, provenance=prov, panoptic=True)
    _done({"provenance": prov, "out": str(args.out)})


def cmd_eval(args):
    run = _run(args)
    meta = read_labeling_meta(args.pred)
    if args.expect_provenance and meta["provenance"] not in args.expect_provenance:
        raise FormatError(f"{args.pred}: provenance {meta['provenance']!r}, expected {args.expect_provenance}")
    gt = run.gt_words()
    result = {"schema": "losc.eval/1", "pred": str(args.pred), "provenance": meta["provenance"]}
    labs = run.read(args.pred)
    result["semantic"] = run.evaluate(labs, gt)
    if meta.get("panoptic"):
        words = read_panoptic(args.pred, run.ds)
        result["panoptic"] = run.evaluate_panoptic(words, gt)
    text = report.eval_text(result, run.ds.classset)
    if args.out:
        io.write_json(args.out, result)
        Path(args.out).with_suffix(".txt").write_text(text)
    if args.figures:
        stages = {meta["provenance"]: result["semantic"]}
        report.render_figures({"stages": stages}, None, args.figures, run.ds.classset)
    print(text, file=sys.stderr)
    mode = run.cfg.eval_mode
    _done({"provenance": meta["provenance"], "mIoU": result["semantic"][mode]["mIoU"],
           "coverage": result["semantic"]["coverage"],
           **({"PQ": result["panoptic"]["classes"]["PQ"]} if "panoptic" in result else {})})


def cmd_pipeline(args):
    summary = run_pipeline(args.manifest, _config(args), args.out, figures=not args.no_figures)
    _done(summary)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="losc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--sequences", type=int, default=4)
    s.add_argument("--scans", type=int, default=40)
    s.add_argument("--points", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zero-noise", action="store_true")
    s.add_argument("--flip", type=float, default=0.15, help="shared symmetric flip rate")
    s.add_argument("--drop", type=float, default=0.05, help="shared drop-to-ignore rate")
    s.add_argument("--boundary", type=int, default=2, help="shared boundary corruption width (px)")
    s.add_argument("--variant-flip", type=float, default=0.03)
    s.add_argument("--variant-drop", type=float, default=0.01)
    s.set_defaults(func=cmd_synth)

    def stage(name, help_, func):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--manifest", type=Path, required=True)
        q.add_argument("--out", type=Path, required=name != "eval")
        _add_config_args(q)
        q.set_defaults(func=func)
        return q

    stage("backproject", "label points from the base label maps", cmd_backproject)
    q = stage("tbc", "temporal voxel voting", cmd_tbc)
    q.add_argument("--labels", type=Path, required=True)
    q = stage("abc", "unanimity over augmentation variants, then voxel voting", cmd_abc)
    q.add_argument("--abc-out", type=Path, help="also write the unanimity labels before voting")
    q = stage("combine", "merge augmentation and time labels via robust classes", cmd_combine)
    q.add_argument("--aug", type=Path, required=True)
    q.add_argument("--tim", type=Path, required=True)
    q = stage("iterate", "self-training rounds with the k-NN segmenter", cmd_iterate)
    q.add_argument("--labels", type=Path, required=True)
    q = stage("panoptic", "cluster thing points into instances", cmd_panoptic)
    q.add_argument("--labels", type=Path, required=True)
    q = stage("eval", "score labels against ground truth", cmd_eval)
    q.add_argument("--pred", type=Path, required=True)
    q.add_argument("--expect-provenance", action="append")
    q.add_argument("--figures", type=Path)
    q = stage("pipeline", "run every stage end to end", cmd_pipeline)
    q.add_argument("--no-figures", action="store_true")
    return p


_EXIT_CODES = {ConfigError: 2, FormatError: 3, MalformedPoseError: 3}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as e:
        code = next((c for t, c in _EXIT_CODES.items() if isinstance(e, t)), 1)
        err = {"error": type(e).__name__, "message": str(e).strip("'\""), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
