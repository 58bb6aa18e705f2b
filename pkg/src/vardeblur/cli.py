"""Command-line entry point: ``vardeblur synth | deblur | eval``."""

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np

from .__version__ import __version__
from .constants import DATASET_TAU
from .constants import EXIT_IO
from .constants import EXIT_NUMERICAL
from .constants import EXIT_OK
from .constants import EXIT_USAGE
from .constants import FLOW_BWD_PATTERN
from .constants import FLOW_FWD_PATTERN
from .constants import FRAME_PATTERN
from .constants import SIGMA_PATTERN
from .dataset import BUNDLED_SCENES
from .dataset import SceneSpec
from .dataset import bundled_scene
from .dataset import epe
from .dataset import load_dataset
from .dataset import load_scene_spec
from .dataset import psnr
from .dataset import read_flows
from .dataset import render_scene
from .dataset import ssim
from .dataset import synthesize_blur
from .dataset import write_dataset
from .energy import EnergyLog
from .exceptions import ConfigError
from .exceptions import FileFormatError
from .exceptions import NumericalAbortError
from .imagecore import Image
from .io import read_frames
from .io import write_flo
from .io import write_pfm
from .io import write_png
from .pipeline import PipelineConfig
from .pipeline import deblur_sequence
from .utils import read_json
from .utils import to_jsonable
from .utils import write_json

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    """Record of one command invocation, written next to its outputs."""

    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    energy_log: Optional[str] = None
    seconds: float = 0.0
    version: str = __version__

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(self)

    def write(self, path: Path) -> None:
        write_json(path, self.to_dict())


# ============================================================================
# synth
# ============================================================================


def _load_spec(value: str) -> SceneSpec:
    path = Path(value)
    if path.is_file():
        return load_scene_spec(path)
    if value in BUNDLED_SCENES:
        return bundled_scene(value)
    raise FileNotFoundError(f"Scene spec not found: {value}")


def cmd_synth(spec_path: str, k: int, pre_blur_sigma: float, out_dir: Path) -> Path:
    started = time.perf_counter()
    spec = _load_spec(spec_path)
    subframes = render_scene(spec)
    pairs = synthesize_blur(subframes, k, pre_blur_sigma, scene=spec)
    manifest = RunManifest(
        command="synth",
        config={
            "k": k,
            "tau": DATASET_TAU,
            "pre_blur_sigma": pre_blur_sigma,
            "scene": spec.to_dict(),
        },
        inputs={"spec": spec_path},
        outputs={"dir": str(out_dir)},
    )
    manifest.seconds = time.perf_counter() - started
    payload = manifest.to_dict()
    payload.update(manifest.config)
    payload["frames"] = len(pairs)
    return write_dataset(pairs, out_dir, payload)


# ============================================================================
# deblur
# ============================================================================


def resolve_frame_dir(directory: Path) -> Path:
    """``latent/`` or ``blurry/`` inside ``directory`` when present, else itself."""
    for sub in ("latent", "blurry"):
        if (directory / sub).is_dir():
            return directory / sub
    return directory


def load_config(path: Optional[Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = read_json(path)
    except ValueError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return PipelineConfig.from_dict(raw)


def cmd_deblur(
    in_dir: Path,
    config_path: Optional[Path],
    out_dir: Path,
    no_defocus: bool = False,
    levels: Optional[int] = None,
    verbose: bool = False,
) -> Dict[str, Any]:
    started = time.perf_counter()
    config = load_config(config_path)
    if no_defocus:
        config = replace(config, enable_defocus=False)
    if levels is not None:
        config = replace(config, num_levels=levels)
    frame_dir = resolve_frame_dir(Path(in_dir))
    blurries = read_frames(frame_dir)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "energy.jsonl" if verbose else None
    energy_log = EnergyLog(log_path) if log_path is not None else None
    try:
        result = deblur_sequence(blurries, config, energy_log, verbose)
    finally:
        if energy_log is not None:
            energy_log.close()

    for i, latent in enumerate(result.latents):
        write_png(out_dir / "latent" / FRAME_PATTERN.format(i), latent)
    for i, (fwd, bwd) in enumerate(result.flows):
        write_flo(out_dir / "flow" / FLOW_FWD_PATTERN.format(i), fwd)
        write_flo(out_dir / "flow" / FLOW_BWD_PATTERN.format(i), bwd)
    for i, sigma in enumerate(result.sigmas):
        write_pfm(out_dir / "sigma" / SIGMA_PATTERN.format(i), sigma)
    report = result.report.to_dict()
    write_json(out_dir / "report.json", report)

    RunManifest(
        command="deblur",
        config=config.to_dict(),
        inputs={
            "in": str(frame_dir),
            "config": "" if config_path is None else str(config_path),
        },
        outputs={"dir": str(out_dir), "report": str(out_dir / "report.json")},
        energy_log=None if log_path is None else str(log_path),
        seconds=time.perf_counter() - started,
    ).write(out_dir / "manifest.json")
    return report


# ============================================================================
# eval
# ============================================================================


def _frame_metrics(result: Image, gt: Image, prefix: str = "") -> Dict[str, float]:
    return {f"{prefix}psnr": psnr(result, gt), f"{prefix}ssim": ssim(result, gt)}


def evaluate(result_dir: Path, gt_dir: Path) -> Dict[str, Any]:
    """
    Per-frame and mean PSNR/SSIM of a result against a ground-truth set.

    Blurry baselines are added when the ground truth carries ``blurry/``;
    EPE columns when both sides carry flows.
    """
    result_dir = Path(result_dir)
    results = read_frames(resolve_frame_dir(result_dir))
    gt = load_dataset(gt_dir)
    if len(results) != len(gt.sharps):
        raise ConfigError(
            f"Result has {len(results)} frames but ground truth has "
            f"{len(gt.sharps)}"
        )
    flows = read_flows(result_dir / "flow", len(results))
    flow_pairs = None
    if flows is not None and gt.flows is not None:
        flow_pairs = list(zip(flows, gt.flows))

    rows: List[Dict[str, float]] = []
    for i, (frame, sharp) in enumerate(zip(results, gt.sharps)):
        row: Dict[str, float] = {"frame": i}
        row.update(_frame_metrics(frame, sharp))
        if gt.blurries:
            row.update(_frame_metrics(gt.blurries[i], sharp, "blurry_"))
        if flow_pairs is not None:
            (fwd, bwd), (gt_fwd, gt_bwd) = flow_pairs[i]
            row["epe_fwd"] = epe(fwd, gt_fwd)
            row["epe_bwd"] = epe(bwd, gt_bwd)
        rows.append(row)
    columns = [c for c in rows[0] if c != "frame"]
    mean = {c: float(np.mean([r[c] for r in rows])) for c in columns}
    return {"frames": rows, "mean": mean, "columns": columns}


def format_table(metrics: Dict[str, Any]) -> str:
    columns = metrics["columns"]
    header = f"{'frame':>6}" + "".join(f"{c:>14}" for c in columns)
    lines = [header, "-" * len(header)]
    for row in metrics["frames"]:
        lines.append(
            f"{row['frame']:>6}" + "".join(f"{row[c]:>14.4f}" for c in columns)
        )
    lines.append("-" * len(header))
    lines.append(
        f"{'mean':>6}" + "".join(f"{metrics['mean'][c]:>14.4f}" for c in columns)
    )
    return "\n".join(lines)


def cmd_eval(
    result_dir: Path, gt_dir: Path, json_path: Optional[Path] = None
) -> Dict[str, Any]:
    started = time.perf_counter()
    metrics = evaluate(result_dir, gt_dir)
    print(format_table(metrics))
    json_path = Path(json_path) if json_path else Path(result_dir) / "metrics.json"
    write_json(json_path, metrics)
    RunManifest(
        command="eval",
        inputs={"result": str(result_dir), "gt": str(gt_dir)},
        outputs={"metrics": str(json_path)},
        seconds=time.perf_counter() - started,
    ).write(Path(result_dir) / "eval_manifest.json")
    return metrics


# ============================================================================
# Entry point
# ============================================================================


class _Parser(argparse.ArgumentParser):
    """Reports usage errors with the usage exit code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="vardeblur",
        description="Joint video deblurring, optical flow and defocus estimation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="render a synthetic blur dataset")
    synth.add_argument(
        "--spec",
        required=True,
        help=f"scene spec JSON, or one of: {', '.join(BUNDLED_SCENES)}",
    )
    synth.add_argument("--k", type=int, default=9, help="subframes per blurry frame")
    synth.add_argument("--pre-blur", type=float, default=0.0, dest="pre_blur")
    synth.add_argument("--out", type=Path, required=True)

    deblur = sub.add_parser("deblur", help="deblur a frame sequence")
    deblur.add_argument("--in", type=Path, required=True, dest="in_dir")
    deblur.add_argument("--config", type=Path, default=None)
    deblur.add_argument("--out", type=Path, required=True)
    deblur.add_argument("--no-defocus", action="store_true")
    deblur.add_argument("--levels", type=int, default=None)
    deblur.add_argument(
        "--verbose",
        action="store_true",
        help="debug logging and a per-step energy.jsonl",
    )

    evaluate_cmd = sub.add_parser("eval", help="score a result against ground truth")
    evaluate_cmd.add_argument("--result", type=Path, required=True)
    evaluate_cmd.add_argument("--gt", type=Path, required=True)
    evaluate_cmd.add_argument("--json", type=Path, default=None, dest="json_path")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.k, args.pre_blur, args.out)
        elif args.command == "deblur":
            cmd_deblur(
                args.in_dir,
                args.config,
                args.out,
                no_defocus=args.no_defocus,
                levels=args.levels,
                verbose=verbose,
            )
        else:
            cmd_eval(args.result, args.gt, args.json_path)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbortError as e:
        print(
            f"error: {e} (level={e.level}, round={e.round_index})", file=sys.stderr
        )
        return EXIT_NUMERICAL
    except (OSError, FileFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
