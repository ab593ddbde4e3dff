"""Command-line entry point: synth, encode, decode, loss, eval, bench, ablate, render."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar

from . import __version__
from .ablation import OCCLUSION_SCENES, centroid_ablation, keycentroid_ablation, noise_robustness
from .bench import bench_decode, compare_to_baseline
from .config import (
    BenchConfig,
    DecodeConfig,
    EncodeConfig,
    SynthConfig,
    add_config_arguments,
    config_from_args,
    to_dict,
)
from .decoder import decode
from .encoder import encode_scene
from .errors import CodecError, ConfigError, SchemaError
from .field_io import (
    FIELD_FILES,
    load_annotations,
    load_detections,
    read_encoded,
    save_annotations,
    save_detections,
    write_encoded,
)
from .losses import DEFAULT_WEIGHTS, combined_loss
from .metrics import evaluate
from .models import EncodedFields, SkeletonSpec
from .overlay import render_overlay
from .reports import ABLATION_COLUMNS, BENCH_COLUMNS, PR_COLUMNS, write_csv, write_json
from .synth import generate_scene, make_occlusion_suite

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
MANIFEST = "manifest.json"

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config: dict[str, Any]
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)
    version: str = __version__

    def write(self, directory: Path) -> Path:
        return write_json(directory / MANIFEST, asdict(self))


def configure_logging(verbosity: int) -> None:
    """WARNING by default, INFO with -v, DEBUG with -vv."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%H:%M:%S",
    )


def thread_cap() -> int:
    """Worker cap from VC_THREADS, else the CPU count."""
    raw = os.environ.get("VC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VC_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"VC_THREADS must be >= 1, got {value}")
    return value


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Order-preserving map over a pool capped by VC_THREADS."""
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _progress(label: str) -> Callable[[float, Optional[str]], None]:
    def report(fraction: float, note: Optional[str] = None) -> None:
        LOGGER.info("%s %3.0f%% %s", label, 100.0 * fraction, note or "")

    return report


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc


def _manifest_dir(output: Path) -> Path:
    return output if output.suffix == "" else output.parent


# ---------- input discovery ----------
def _is_field_dir(path: Path) -> bool:
    return all((path / name).is_file() for name in FIELD_FILES.values())


def _scene_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".json" and p.name != MANIFEST)
    return [path]


def _field_inputs(path: Path) -> list[Path]:
    if _is_field_dir(path):
        return [path]
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_dir() and _is_field_dir(p))
    raise SchemaError(f"{path} is not a field directory")


# ---------- subcommands ----------
def cmd_synth(args: argparse.Namespace) -> RunManifest:
    cfg = config_from_args(SynthConfig, args)
    if args.persons is not None:
        cfg = replace(cfg, persons_min=args.persons, persons_max=args.persons)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    cfg = cfg.resolved()
    output = Path(args.output)
    if args.occlusion:
        scenes = make_occlusion_suite(cfg, args.count)
    else:
        scenes = [generate_scene(cfg, index) for index in range(args.count)]
    if args.count == 1:
        targets = [output]
        output.parent.mkdir(parents=True, exist_ok=True)
    else:
        output.mkdir(parents=True, exist_ok=True)
        targets = [output / f"scene_{index:04d}.json" for index in range(args.count)]
    for scene, target in zip(scenes, targets):
        save_annotations(scene, target)
        if args.fields:
            fields = encode_scene(scene, cfg=EncodeConfig(disk_radius=cfg.disk_radius))
            write_encoded(fields, Path(args.fields) / target.stem)
    LOGGER.info("synth: wrote %d scenes to %s", len(scenes), output)
    return RunManifest(
        "synth",
        [],
        {"synth": to_dict(cfg), "count": args.count, "occlusion": args.occlusion},
        outputs=[str(t) for t in targets],
        seeds={"rng_seed": cfg.rng_seed},
    )


def cmd_encode(args: argparse.Namespace) -> RunManifest:
    cfg = config_from_args(EncodeConfig, args).resolved()
    inputs = _scene_inputs(Path(args.input))
    output = Path(args.output)
    single = not Path(args.input).is_dir()

    def one(path: Path) -> str:
        fields = encode_scene(load_annotations(path), cfg=cfg)
        target = output if single else output / path.stem
        write_encoded(fields, target)
        return str(target)

    outputs = parallel_map(one, inputs)
    LOGGER.info("encode: %d scenes -> %s", len(outputs), output)
    return RunManifest("encode", [], {"encode": to_dict(cfg)}, [str(p) for p in inputs], outputs)


def cmd_decode(args: argparse.Namespace) -> RunManifest:
    cfg = config_from_args(DecodeConfig, args).resolved()
    source = Path(args.input)
    inputs = _field_inputs(source)
    output = Path(args.output)
    single = _is_field_dir(source)
    if not single:
        output.mkdir(parents=True, exist_ok=True)

    def one(path: Path) -> str:
        fields = read_encoded(path)
        instances = decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, cfg=cfg)
        target = output if single else output / f"{path.name}.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_detections(instances, fields.heatmaps.height, fields.heatmaps.width, target)
        LOGGER.info("decode: %s -> %d instances", path, len(instances))
        return str(target)

    outputs = parallel_map(one, inputs)
    return RunManifest("decode", [], {"decode": to_dict(cfg)}, [str(p) for p in inputs], outputs)


def cmd_loss(args: argparse.Namespace) -> RunManifest:
    cfg = config_from_args(EncodeConfig, args).resolved()
    preds: EncodedFields = read_encoded(args.fields)
    scene = load_annotations(args.scene)
    report = combined_loss(preds, scene, weights=tuple(args.weights), cfg=cfg)
    payload = report.to_dict()
    output = Path(args.output)
    write_json(output, payload)
    print(json.dumps(payload, sort_keys=True))
    return RunManifest(
        "loss",
        [],
        {"encode": to_dict(cfg), "weights": list(args.weights)},
        [str(args.fields), str(args.scene)],
        [str(output)],
    )


def cmd_eval(args: argparse.Namespace) -> RunManifest:
    det_path, gt_path = Path(args.detections), Path(args.scenes)
    if det_path.is_dir() != gt_path.is_dir():
        raise SchemaError("detections and scenes must both be files or both be directories")
    if det_path.is_dir():
        gt_files = _scene_inputs(gt_path)
        pairs = [(det_path / f"{g.stem}.json", g) for g in gt_files]
    else:
        pairs = [(det_path, gt_path)]
    skeleton = SkeletonSpec.coco()

    def load(pair: tuple[Path, Path]):
        scene = load_annotations(pair[1], skeleton)
        height, width, instances = load_detections(pair[0], (scene.height, scene.width))
        if (height, width) != (scene.height, scene.width):
            raise SchemaError(f"{pair[0]} is {width}x{height}, {pair[1]} is {scene.width}x{scene.height}")
        return instances, scene

    loaded = parallel_map(load, pairs)
    result = evaluate([d for d, _ in loaded], [s for _, s in loaded], skeleton=skeleton)
    output = Path(args.output)
    write_json(output, result.to_dict())
    outputs = [str(output)]
    if args.pr_csv:
        outputs.append(str(write_csv(args.pr_csv, result.pr_rows(), PR_COLUMNS)))
    summary = {"keypoint_map": result.keypoint_ap.mean, "mask_map": result.mask_ap.mean}
    print(json.dumps(summary, sort_keys=True))
    return RunManifest(
        "eval", [], {}, [str(p) for pair in pairs for p in pair], outputs
    )


def cmd_bench(args: argparse.Namespace) -> RunManifest:
    scene_cfg = config_from_args(SynthConfig, args, "scene_").resolved()
    decode_cfg = config_from_args(DecodeConfig, args).resolved()
    bench_cfg = config_from_args(BenchConfig, args).resolved()
    report = bench_decode(
        scene_cfg,
        decode_cfg,
        bench_cfg.runs,
        encode_cfg=EncodeConfig(
            disk_radius=decode_cfg.disk_radius,
            offset_normalization=decode_cfg.offset_normalization,
            centroid_mode=decode_cfg.centroid_mode,
        ),
        threads=bench_cfg.threads,
        warmup=bench_cfg.warmup,
        progress_cb=_progress("bench"),
    )
    payload = report.to_dict()
    if args.baseline:
        baseline = _read_json(Path(args.baseline))
        ok, ratio = compare_to_baseline(report, baseline, bench_cfg.baseline_tolerance)
        payload["baseline"] = {"path": str(args.baseline), "ratio": ratio, "within_tolerance": ok}
    output = Path(args.output)
    write_json(output, payload)
    outputs = [str(output)]
    if args.csv:
        outputs.append(str(write_csv(args.csv, report.rows, BENCH_COLUMNS)))
    print(json.dumps({"fps": report.fps, "total_ms": report.total_ms}, sort_keys=True))
    return RunManifest(
        "bench",
        [],
        {"scene": to_dict(scene_cfg), "decode": to_dict(decode_cfg), "bench": to_dict(bench_cfg)},
        outputs=outputs,
        seeds={"rng_seed": scene_cfg.rng_seed},
    )


def cmd_ablate(args: argparse.Namespace) -> RunManifest:
    scene_cfg = config_from_args(SynthConfig, args, "scene_").resolved()
    studies = ["keycentroid", "centroid", "robustness"] if args.study == "all" else [args.study]
    reports = []
    for study in studies:
        progress = _progress(f"ablate/{study}")
        if study == "keycentroid":
            reports.append(keycentroid_ablation(scene_cfg, args.count, args.noise_sigma, progress_cb=progress))
        elif study == "centroid":
            suite_cfg = replace(OCCLUSION_SCENES, rng_seed=scene_cfg.rng_seed, width=scene_cfg.width, height=scene_cfg.height)
            reports.append(centroid_ablation(suite_cfg, args.count, progress_cb=progress))
        else:
            reports.append(noise_robustness(scene_cfg, args.count, args.noise_sigma, progress_cb=progress))
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    json_path = write_json(output / "ablation.json", [r.to_dict() for r in reports])
    csv_path = write_csv(output / "ablation.csv", [row for r in reports for row in r.rows()], ABLATION_COLUMNS)
    for report in reports:
        print(json.dumps({report.study: report.values, "gap": report.gap}, sort_keys=True))
    return RunManifest(
        "ablate",
        [],
        {"scene": to_dict(scene_cfg), "study": args.study, "count": args.count, "noise_sigma": args.noise_sigma},
        outputs=[str(json_path), str(csv_path)],
        seeds={"rng_seed": scene_cfg.rng_seed},
    )


def cmd_render(args: argparse.Namespace) -> RunManifest:
    path = Path(args.input)
    doc = _read_json(path)
    if isinstance(doc, dict) and "instances" in doc:
        height, width, source = load_detections(path)
    else:
        source = load_annotations(path)
        height, width = source.height, source.width
    output = render_overlay(source, (height, width), args.output)
    return RunManifest("render", [], {}, [str(path)], [str(output)])


# ---------- parser ----------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="centroid-codec",
        description="Encode, decode and evaluate centroid pose/instance fields.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str, handler: Callable[[argparse.Namespace], RunManifest]):
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(handler=handler)
        return p

    p = command("synth", "Generate synthetic scene annotations.", cmd_synth)
    p.add_argument("-o", "--output", required=True, help="Scene JSON, or a directory when --count > 1.")
    p.add_argument("--count", type=int, default=1, help="Number of scenes.")
    p.add_argument("--persons", type=int, default=None, help="Fix the person count (sets both bounds).")
    p.add_argument("--seed", type=int, default=None, help="Shortcut for --rng-seed.")
    p.add_argument("--occlusion", action="store_true", help="Generate the entangled occlusion suite.")
    p.add_argument("--fields", default=None, help="Also write encoded fields under this directory.")
    add_config_arguments(p, SynthConfig)

    p = command("encode", "Encode scene annotations into field files.", cmd_encode)
    p.add_argument("input", help="Scene JSON or a directory of them.")
    p.add_argument("-o", "--output", required=True, help="Output field directory.")
    add_config_arguments(p, EncodeConfig)

    p = command("decode", "Decode field files into detections.", cmd_decode)
    p.add_argument("input", help="Field directory or a directory of field directories.")
    p.add_argument("-o", "--output", required=True, help="Detections JSON, or a directory for batches.")
    add_config_arguments(p, DecodeConfig)

    p = command("loss", "Score predicted fields against a scene.", cmd_loss)
    p.add_argument("fields", help="Directory holding predicted field files.")
    p.add_argument("scene", help="Ground-truth scene JSON.")
    p.add_argument("-o", "--output", default="loss.json", help="Loss report JSON.")
    p.add_argument("--weights", type=float, nargs=3, default=list(DEFAULT_WEIGHTS), metavar=("HM", "KC", "MC"))
    add_config_arguments(p, EncodeConfig)

    p = command("eval", "Keypoint and mask AP of detections against scenes.", cmd_eval)
    p.add_argument("detections", help="Detections JSON or a directory of them.")
    p.add_argument("scenes", help="Scene JSON or a directory of them (matched by file stem).")
    p.add_argument("-o", "--output", default="eval.json", help="Evaluation report JSON.")
    p.add_argument("--pr-csv", default=None, help="Also write precision/recall points as CSV.")

    p = command("bench", "Time the decode pipeline.", cmd_bench)
    p.add_argument("-o", "--output", default="bench.json", help="Bench report JSON.")
    p.add_argument("--csv", default=None, help="Per-run timing CSV.")
    p.add_argument("--baseline", default=None, help="Pinned bench JSON to compare against.")
    add_config_arguments(p, SynthConfig, "scene_")
    add_config_arguments(p, DecodeConfig)
    add_config_arguments(p, BenchConfig)

    p = command("ablate", "Run the built-in comparison studies.", cmd_ablate)
    p.add_argument("-o", "--output", default="ablation", help="Output directory.")
    p.add_argument("--study", choices=("keycentroid", "centroid", "robustness", "all"), default="all")
    p.add_argument("--count", type=int, default=100, help="Scenes per study.")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="Field noise for the noisy studies.")
    add_config_arguments(p, SynthConfig, "scene_")

    p = command("render", "Draw a scene or detections as a PNG overlay.", cmd_render)
    p.add_argument("input", help="Scene JSON or detections JSON.")
    p.add_argument("-o", "--output", required=True, help="PNG path.")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.verbose)
    try:
        manifest = args.handler(args)
        manifest.argv = argv
        manifest.write(_manifest_dir(Path(args.output)))
    except (CodecError, OSError) as exc:
        LOGGER.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:  # pragma: no cover
    sys.exit(run())
