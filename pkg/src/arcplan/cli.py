"""Command-line entry points for the planning pipeline.

Subcommands: ``phantom gen``, ``plan run``, ``plan sequence``, ``plan eval``,
``plan compare``, ``serve``.  Every failure exits nonzero with a single
``error: ...`` diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .analytics import noninferiority_test
from .config import PipelineSettings, load_settings, parse_config_text, settings_to_text
from .dose import DoseOperator, FluenceStack, ct_normalize
from .geometry import ControlPointGeometry, VoxelGrid
from .phantom import StructureSet, generate_phantom
from .pipeline import PlanSession
from .report import (
    dvh_figure,
    fluence_figure,
    read_report_text,
    trace_figure,
    write_report_csv,
    write_report_text,
    write_timing_table,
)
from .sequencer import read_plan, reconstruct_fluence, sequence_plan, write_plan
from .tensorio import read_tensor, write_tensor

MASK_ORDER = ("PTV", "CTV", "Bladder", "Rectum", "Body")


def save_phantom_dir(ct: VoxelGrid, structures: StructureSet, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "ct.tensor", ct.values)
    for name in MASK_ORDER:
        if name in structures.masks:
            write_tensor(out / f"mask_{name}.tensor", structures.masks[name].values)
    meta = [
        "arcplan-phantom v1",
        f"spacing = {' '.join(repr(float(s)) for s in ct.spacing)}",
        f"origin = {' '.join(repr(float(o)) for o in ct.origin)}",
        f"prescription_dose = {float(structures.prescription_dose)!r}",
        f"masks = {' '.join(n for n in MASK_ORDER if n in structures.masks)}",
    ]
    (out / "phantom.cfg").write_text("\n".join(meta) + "\n")


def load_phantom_dir(path: Path) -> tuple[VoxelGrid, StructureSet]:
    meta = parse_config_text((path / "phantom.cfg").read_text().replace("arcplan-phantom v1", ""))
    spacing = tuple(float(v) for v in meta["spacing"].split())
    origin = tuple(float(v) for v in meta["origin"].split())
    rx = float(meta["prescription_dose"])
    ct = VoxelGrid(read_tensor(path / "ct.tensor"), spacing, origin)
    masks = {
        name: VoxelGrid(read_tensor(path / f"mask_{name}.tensor"), spacing, origin)
        for name in meta["masks"].split()
    }
    return ct, StructureSet(masks=masks, prescription_dose=rx)


def _settings(args) -> PipelineSettings:
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["phantom.seed"] = str(args.seed)
    if getattr(args, "s_bladder", None) is not None:
        extra["objective.s_bladder"] = str(args.s_bladder)
    if getattr(args, "s_rectum", None) is not None:
        extra["objective.s_rectum"] = str(args.s_rectum)
    if getattr(args, "iters", None) is not None:
        extra["optimizer.max_iters"] = str(args.iters)
    return load_settings(getattr(args, "config", None), extra)


def cmd_phantom_gen(args) -> int:
    settings = _settings(args)
    ct, structures = generate_phantom(settings.phantom)
    out = Path(args.out)
    save_phantom_dir(ct, structures, out)
    (out / "settings.cfg").write_text(settings_to_text(settings))
    print(f"phantom written to {out} (seed {settings.phantom.seed})")
    return 0


def _write_replan_outputs(session: PlanSession, out: Path, case_id: str) -> None:
    rep = session.latest
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "fluence.tensor", rep.result.fluence.values)
    write_tensor(out / "fluence_sequenced.tensor", rep.sequenced_fluence.values)
    write_tensor(out / "dose.tensor", rep.dose.values)
    write_plan(rep.plan, out / "plan.txt")
    write_report_text(rep.metrics, out / "report.txt", case_id=case_id)
    write_report_csv(rep.metrics, out / "report.csv")
    write_timing_table(rep.timings, out / "timing.txt")
    dvh_figure(rep.dvh_curves, session.prescription, out / "dvh.png")
    trace_figure(rep.result.objective_trace, out / "objective_trace.png")
    mid = rep.plan.n_cp // 2
    fluence_figure(rep.result.fluence.values, mid, out / f"fluence_cp{mid}.png", plan=rep.plan)


def cmd_plan_run(args) -> int:
    settings = _settings(args)
    if args.threads is not None:
        os.environ["ARCPLAN_THREADS"] = str(args.threads)  # results are thread-invariant
    session = PlanSession(settings)
    session.replan()
    out = Path(args.out)
    case_id = f"seed{settings.phantom.seed}"
    save_phantom_dir(session.ct, session.structures, out / "phantom")
    _write_replan_outputs(session, out, case_id)
    print("setup stages")
    print(session.setup_timings.table())
    print()
    print("replan stages")
    print(session.latest.timings.table())
    ptv = session.latest.metrics.structures["PTV"]
    print()
    print(f"PTV HI {ptv['HI']:.4f}  D98 {ptv['D98']:.2f} Gy  D50 {ptv['D50']:.2f} Gy")
    return 0


def cmd_plan_sequence(args) -> int:
    settings = _settings(args)
    values = read_tensor(Path(args.fluence))
    if values.ndim != 3:
        raise ValueError(f"fluence tensor must be 3D, got shape {values.shape}")
    fluence = FluenceStack(values.astype(np.float64), spacing=settings.arc.bev_spacing)
    plan = sequence_plan(fluence, settings.sequencer)
    write_plan(plan, Path(args.out))
    print(f"sequenced {plan.n_cp} control points, total MU {plan.total_mu():.3f}")
    return 0


def cmd_plan_eval(args) -> int:
    settings = _settings(args)
    ct, structures = load_phantom_dir(Path(args.phantom))
    plan = read_plan(Path(args.plan))
    geoms = [
        ControlPointGeometry(
            index=i,
            gantry_angle=float(g),
            source_axis_distance=settings.arc.sad,
            bev_spacing=plan.spacing,
            bev_fov=plan.fov,
        )
        for i, g in enumerate(plan.gantry_angles)
    ]
    op = DoseOperator(ct_normalize(ct), geoms, settings.beam)
    fluence = reconstruct_fluence(plan)
    dose = op.forward(fluence)

    from .analytics import compute_metric_report, dvh

    metrics = compute_metric_report(dose, structures, structures.prescription_dose)
    top = max(float(dose.values.max()), structures.prescription_dose) * 1.1
    curves = {
        name: dvh(dose, structures.masks[name], max_dose=top, structure=name)
        for name in ("PTV", *structures.oar_names)
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_text(metrics, out / "report.txt", case_id=args.case_id)
    write_report_csv(metrics, out / "report.csv")
    write_tensor(out / "dose.tensor", dose.values)
    dvh_figure(curves, structures.prescription_dose, out / "dvh.png")
    for structure, metric, value in metrics.rows():
        print(f"{structure}.{metric} = {value:.6g}")
    return 0


def _compare_direction(structure: str, metric: str) -> str | None:
    if metric == "HI":
        return "lower"
    if metric == "CI":
        return None  # unitless conformity has no stated margin
    if metric == "D98" and structure == "PTV":
        return "higher"
    return "lower"


def cmd_plan_compare(args) -> int:
    a_cases = read_report_text(Path(args.report_a))
    b_cases = read_report_text(Path(args.report_b))
    shared_cases = [c for c in a_cases if c in b_cases]
    if len(shared_cases) < 5:
        raise ValueError(
            f"need at least 5 shared cases for non-inferiority, got {len(shared_cases)}"
        )
    keys = sorted(set(a_cases[shared_cases[0]]) & set(b_cases[shared_cases[0]]))
    header = f"{'metric':<16} {'mean_diff':>10} {'p':>8} {'margin':>7} {'n':>4}  non-inferior"
    lines = [header, "-" * len(header)]
    for structure, metric in keys:
        direction = _compare_direction(structure, metric)
        if direction is None:
            continue
        a_vals = np.array([a_cases[c][(structure, metric)] for c in shared_cases])
        b_vals = np.array([b_cases[c][(structure, metric)] for c in shared_cases])
        margin = args.margin_hi if metric == "HI" else args.margin_gy
        res = noninferiority_test(a_vals, b_vals, margin=margin, direction=direction)
        lines.append(
            f"{structure + ' ' + metric:<16} {res.mean_diff:>10.4f} {res.p_value:>8.4f}"
            f" {res.margin:>7.3f} {res.n:>4d}  {'yes' if res.verdict else 'no'}"
        )
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


def cmd_serve(args) -> int:
    from .server import run_server

    settings = _settings(args)
    host = args.host or os.environ.get("ARCPLAN_BIND", "127.0.0.1")
    threads = args.threads or int(os.environ.get("ARCPLAN_THREADS", "4"))
    run_server(settings, host=host, port=args.port, static_dir=args.static, threads=threads)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arcplan",
        description="Deterministic single-arc VMAT planning: phantom anatomy in, "
                    "leaf-sequenced plan and evaluation report out.",
    )
    sub = parser.add_subparsers(dest="group", required=True)

    phantom = sub.add_parser("phantom", help="phantom generation").add_subparsers(
        dest="cmd", required=True
    )
    gen = phantom.add_parser("gen", help="generate a phantom case directory")
    gen.add_argument("--config", help="structured-text config file")
    gen.add_argument("--seed", type=int, help="phantom random seed")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(fn=cmd_phantom_gen)

    plan = sub.add_parser("plan", help="planning pipeline").add_subparsers(
        dest="cmd", required=True
    )
    run = plan.add_parser("run", help="full pipeline: phantom, optimize, sequence, report")
    run.add_argument("--config", help="structured-text config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True)
    run.add_argument("--s-bladder", type=float, dest="s_bladder")
    run.add_argument("--s-rectum", type=float, dest="s_rectum")
    run.add_argument("--iters", type=int)
    run.add_argument("--threads", type=int, help="worker hint; never changes results")
    run.set_defaults(fn=cmd_plan_run)

    seq = plan.add_parser("sequence", help="sequence an existing fluence tensor")
    seq.add_argument("--config", help="structured-text config file")
    seq.add_argument("--fluence", required=True, help="fluence .tensor file")
    seq.add_argument("--out", required=True, help="plan document path")
    seq.set_defaults(fn=cmd_plan_sequence)

    ev = plan.add_parser("eval", help="evaluate a plan document against a phantom")
    ev.add_argument("--config", help="structured-text config file")
    ev.add_argument("--phantom", required=True, help="phantom case directory")
    ev.add_argument("--plan", required=True, help="plan document")
    ev.add_argument("--out", required=True)
    ev.add_argument("--case-id", default="case0", dest="case_id")
    ev.set_defaults(fn=cmd_plan_eval)

    cmp_ = plan.add_parser("compare", help="non-inferiority table for two report batches")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    cmp_.add_argument("--margin-hi", type=float, default=0.01, dest="margin_hi")
    cmp_.add_argument("--margin-gy", type=float, default=1.5, dest="margin_gy")
    cmp_.add_argument("--out")
    cmp_.set_defaults(fn=cmd_plan_compare)

    serve = sub.add_parser("serve", help="interactive replan HTTP service")
    serve.add_argument("--config", help="structured-text config file")
    serve.add_argument("--seed", type=int)
    serve.add_argument("--host", help="bind address (or ARCPLAN_BIND)")
    serve.add_argument("--port", type=int, default=8008)
    serve.add_argument("--static", help="directory of UI assets to serve at /")
    serve.add_argument("--threads", type=int, help="server worker threads (or ARCPLAN_THREADS)")
    serve.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
