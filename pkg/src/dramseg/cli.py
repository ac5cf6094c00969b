"""Command-line driver: generate / propose / train / infer / evaluate.

Exit codes: 0 success, 2 input or configuration error, 3 training
divergence. Every command is deterministic given the same config and
seed, including emitted bytes (volumes, CSVs, checkpoints, overlays).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config, write_config_echo
from .dvol import read_dvol
from .metrics import (
    ConfusionMatrix,
    evaluate_case,
    kappa_bootstrap_ci,
    severity_scores,
    write_kappa_csv,
    write_metrics_csv,
    write_report,
    write_summary_csv,
)
from .model import (
    DCAMNetwork,
    NetworkConfig,
    RegressionNetwork,
    SlimClassifier,
    load_checkpoint,
    read_checkpoint_header,
)
from .phantom import generate_case, list_case_ids, load_case, read_severity_csv, write_case, write_severity_csv
from .pipeline import (
    TrainingDivergence,
    infer_cam_scan,
    infer_scan,
    load_training_cases,
    postprocess_cam,
    train_classifier,
    train_regression,
    write_prediction,
)
from .proposal import propose, proposal_rows, read_proposal, write_proposal, write_proposals_csv


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    num_cases = cfg.num_cases if args.num_cases is None else args.num_cases
    if num_cases < 0:
        raise ConfigError("--num-cases must be nonnegative")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(cfg.first_case, cfg.first_case + num_cases):
        case = generate_case(cfg.phantom, i)
        write_case(case, out_dir)
        cases.append(case)
        print(f"generated {case.case_id}")
    write_severity_csv(cases, out_dir)
    return 0


def cmd_propose(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    case_ids = list_case_ids(data_dir)
    if not case_ids:
        raise ConfigError(f"no cases found under {data_dir}")
    rows = []
    for cid in case_ids:
        case = load_case(data_dir, cid)
        result = propose(case.image, case.lobe_map, cfg.proposal)
        write_proposal(result, data_dir, cid, case.image.spacing)
        rows.extend(proposal_rows(case, result))
        print(f"proposed {cid}")
    write_proposals_csv(rows, data_dir)
    return 0


def _ensure_proposals(cfg: RunConfig, data_dir: Path) -> None:
    if not (data_dir / "proposals.csv").is_file():
        rows = []
        for cid in list_case_ids(data_dir):
            case = load_case(data_dir, cid)
            result = propose(case.image, case.lobe_map, cfg.proposal)
            write_proposal(result, data_dir, cid, case.image.spacing)
            rows.extend(proposal_rows(case, result))
        write_proposals_csv(rows, data_dir)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    run_dir = Path(args.run)
    case_ids = list_case_ids(data_dir)
    if not case_ids:
        raise ConfigError(f"no cases found under {data_dir}")
    _ensure_proposals(cfg, data_dir)
    cases = load_training_cases(data_dir, data_dir, case_ids)
    write_config_echo(cfg, run_dir)
    base = cfg.base_method
    if base in ("dram", "proposed"):
        er, ref, at = cfg.resolved_flags()
        train_regression(cases, cfg.network, cfg.train, run_dir, use_er=er, use_ref=ref, use_at=at)
    elif base in ("cam", "dcam"):
        train_classifier(cases, cfg.network, cfg.train, run_dir, slim=(base == "cam"))
    else:  # pragma: no cover - method list is validated upstream
        raise ConfigError(f"unhandled method {cfg.method}")
    print(f"trained {cfg.method} into {run_dir}")
    return 0


def _latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"))
    if not ckpts:
        raise ConfigError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


def _load_run(run_dir: Path) -> tuple[RunConfig, torch.nn.Module]:
    echo = run_dir / "config.echo"
    if not echo.is_file():
        raise ConfigError(f"{run_dir} has no config.echo; not a run directory?")
    cfg = load_config(echo)
    ckpt = _latest_checkpoint(run_dir)
    net_cfg = NetworkConfig.from_dict(read_checkpoint_header(ckpt)["config"])
    base = cfg.base_method
    if base in ("dram", "proposed"):
        net = RegressionNetwork(net_cfg)
    elif base == "dcam":
        net = DCAMNetwork(net_cfg)
    else:
        net = SlimClassifier(net_cfg)
    load_checkpoint(ckpt, net)
    net.eval()
    return cfg, net


def _run_inference(cfg: RunConfig, net: torch.nn.Module, data_dir: Path, run_dir: Path) -> None:
    base = cfg.base_method
    if cfg.intersect_candidates:
        _ensure_proposals(cfg, data_dir)
    for cid in list_case_ids(data_dir):
        case = load_case(data_dir, cid)
        candidates = None
        if cfg.intersect_candidates:
            candidates = read_proposal(data_dir, cid).candidate_map
        if base in ("dram", "proposed"):
            pred = infer_scan(net, case.image.data, case.lobe_map.data)
            if candidates is not None:
                lesion = (pred == 2) & candidates
                pred[(pred == 2) & ~lesion] = 0
        else:
            cam = infer_cam_scan(net, case.image.data, case.lobe_map.data, slim=(base == "cam"))
            binary = postprocess_cam(cam, case.lobe_map.data, candidates)
            pred = np.where(binary, np.uint8(2), np.uint8(0))
        write_prediction(pred, case.image.spacing, run_dir, cid)
        print(f"inferred {cid}")


def cmd_infer(args) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data)
    if not list_case_ids(data_dir):
        raise ConfigError(f"no cases found under {data_dir}")
    cfg, net = _load_run(run_dir)
    _run_inference(cfg, net, data_dir, run_dir)
    return 0


def _overlay_case(image: np.ndarray, ref: np.ndarray, pred: np.ndarray, out_path: Path) -> None:
    """Three orthogonal slices through the lesion centroid; contours burned in."""
    from PIL import Image

    lo, hi = -1000.0, 400.0
    gray = np.clip((image - lo) / (hi - lo), 0, 1)
    anchor = np.argwhere(ref) if ref.any() else np.argwhere(np.ones_like(ref))
    cz, cy, cx = anchor.mean(axis=0).astype(int)

    def boundary(mask2d):
        m = mask2d.astype(bool)
        inner = m.copy()
        inner[1:] &= m[:-1]; inner[:-1] &= m[1:]
        inner[:, 1:] &= m[:, :-1]; inner[:, :-1] &= m[:, 1:]
        return m & ~inner

    panels = []
    for axis, idx in ((0, cz), (1, cy), (2, cx)):
        sl = [slice(None)] * 3
        sl[axis] = idx
        g = gray[tuple(sl)]
        rgb = np.stack([g, g, g], axis=-1)
        rb = boundary(ref[tuple(sl)])
        pb = boundary(pred[tuple(sl)])
        rgb[rb] = (0.0, 0.9, 0.0)
        rgb[pb] = (1.0, 0.1, 0.1)
        panels.append((rgb * 255).astype(np.uint8))
    h = max(p.shape[0] for p in panels)
    w = sum(p.shape[1] for p in panels) + 2 * (len(panels) - 1)
    canvas = np.zeros((h, w, 3), dtype=np.uint8)
    x = 0
    for p in panels:
        canvas[: p.shape[0], x : x + p.shape[1]] = p
        x += p.shape[1] + 2
    Image.fromarray(canvas).save(out_path, format="PNG")


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data)
    case_ids = list_case_ids(data_dir)
    if not case_ids:
        raise ConfigError(f"no cases found under {data_dir}")
    echo = run_dir / "config.echo"
    if not echo.is_file():
        raise ConfigError(f"{run_dir} has no config.echo; not a run directory?")
    cfg = load_config(echo)

    pred_dir = run_dir / "predictions"
    missing = [cid for cid in case_ids if not (pred_dir / f"{cid}.dvol").is_file()]
    if missing:
        _, net = _load_run(run_dir)
        _run_inference(cfg, net, data_dir, run_dir)

    severity = read_severity_csv(data_dir)
    rows = []
    confusion = ConfusionMatrix()
    pairs: list[tuple[int, int]] = []
    for cid in case_ids:
        case = load_case(data_dir, cid)
        pred_labels = read_dvol(pred_dir / f"{cid}.dvol").data
        pred_lesion = pred_labels == 2
        rows.append(evaluate_case(
            cid, pred_lesion, case.lesion_map.data, case.lobe_map.data, case.image.spacing,
        ))
        pred_scores = severity_scores(pred_lesion, case.lobe_map.data)
        for rec in severity[cid]:
            confusion.add(pred_scores[rec.lobe_id], rec.score)
            pairs.append((pred_scores[rec.lobe_id], rec.score))
        if args.overlays:
            overlay_dir = run_dir / "overlays"
            overlay_dir.mkdir(parents=True, exist_ok=True)
            _overlay_case(case.image.data, case.lesion_map.data > 0, pred_lesion, overlay_dir / f"{cid}.png")

    acc = confusion.accuracy
    try:
        kappa = kappa_bootstrap_ci(pairs, num_resamples=cfg.eval.kappa_resamples, seed=cfg.eval.kappa_seed)
    except ValueError:
        kappa = None
    write_metrics_csv(rows, run_dir)
    write_summary_csv(rows, acc, run_dir)
    if kappa is not None:
        write_kappa_csv(*kappa, len(pairs), run_dir)
    write_report(cfg.method, rows, acc, kappa, confusion, run_dir)
    mean_dsc = float(np.mean([r.dsc for r in rows]))
    print(f"evaluated {len(rows)} cases: mean DSC {100 * mean_dsc:.2f}, ACC {100 * acc:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dramseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write phantom cases + severity labels")
    g.add_argument("--config", default=None, help="run config file (INI sections)")
    g.add_argument("--out", required=True, help="output data directory")
    g.add_argument("--num-cases", type=int, default=None, help="override [phantom] num_cases")
    g.set_defaults(func=cmd_generate)

    pr = sub.add_parser("propose", help="vessel suppression + candidate masks + p*")
    pr.add_argument("--config", default=None)
    pr.add_argument("--data", required=True, help="data directory from generate")
    pr.set_defaults(func=cmd_propose)

    t = sub.add_parser("train", help="train one method variant into a run directory")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--run", required=True, help="run directory to create")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="scan-level predictions from the latest checkpoint")
    i.add_argument("--run", required=True)
    i.add_argument("--data", required=True, help="held-out data directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="metrics + report (runs inference if needed)")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--overlays", action="store_true", help="write per-case contour PNGs")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
