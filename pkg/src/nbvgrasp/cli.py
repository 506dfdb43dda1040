"""Command-line surface: scene/config ingestion, episode and suite
execution, and plot-ready data export.

Verbs:
  run    one episode -> trajectory.jsonl, grasps.csv, events.jsonl,
         metrics.json
  suite  every scene in a directory x k seeds -> per-episode outputs
         plus suite_metrics.json
  field  sample the view-sphere velocity field on an n x n grid ->
         field.csv

Exit codes: 0 success, 2 parse error (unreadable or malformed files),
3 configuration error (unknown keys, out-of-range values).  Every float
is written at 17 significant digits so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import FusionConfig
from .geom import OrientedBox, quat_to_matrix
from .nbv import OccluderPoints, ViewSphere, field_multi, truncate_downward
from .orchestrator import (
    EpisodeResult,
    LoopConfig,
    aggregate,
    derive_view_sphere,
    run_episode,
)
from .relations import RelationConfig
from .scene import ObjectDescription
from .simenv import DetectionNoise, GraspNoise, GroundTruthScene, SimObject

SCHEMA_VERSION = 1
ENV_SEED = "VISO_SEED"
DEFAULT_GRID = 24


class ParseError(Exception):
    """A file could not be read or decoded (exit code 2)."""


class ConfigError(Exception):
    """A configuration value is unknown or out of range (exit code 3)."""


# -- deterministic serialization ------------------------------------------


def fmt_float(x: float) -> str:
    """Render a float at 17 significant digits (full double precision)."""
    return format(float(x), ".17g")


def render_json(value) -> str:
    """JSON text with every float at 17 significant digits.

    The standard encoder prints shortest-round-trip floats, which is
    byte-stable but not fixed-width; this renderer pins the precision so
    output diffs are meaningful bit-for-bit.
    """
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return fmt_float(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        parts = (f"{json.dumps(str(k))}: {render_json(v)}" for k, v in value.items())
        return "{" + ", ".join(parts) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(render_json(v) for v in value) + "]"
    raise TypeError(f"cannot render {type(value).__name__} as JSON")


# -- scene files ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """Everything a scene file carries beyond the ground truth itself."""

    scene: GroundTruthScene
    sphere: ViewSphere | None
    seed: int | None
    region_hint: OrientedBox | None


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as err:
        raise ParseError(f"{path}: {err.strerror or err}") from err
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line {err.lineno}: {err.msg}") from err


def _need(mapping, key: str, path: Path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ParseError(f"{path}: missing key '{key}'")
    return mapping[key]


def _number(value, key: str, path: Path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{path}: key '{key}' must be a number")
    return float(value)


def _floats(value, n: int, key: str, path: Path) -> np.ndarray:
    ok = (
        isinstance(value, (list, tuple))
        and len(value) == n
        and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    )
    if not ok:
        raise ParseError(f"{path}: key '{key}' must be a list of {n} numbers")
    return np.asarray([float(v) for v in value])


def _box_from_mapping(data, key: str, path: Path) -> OrientedBox:
    center = _floats(_need(data, "center", path), 3, f"{key}.center", path)
    half = _floats(
        _need(data, "half_extents", path), 3, f"{key}.half_extents", path
    )
    quat = _floats(
        data.get("rotation", [1.0, 0.0, 0.0, 0.0]), 4, f"{key}.rotation", path
    )
    norm = float(np.linalg.norm(quat))
    if norm < 1e-12:
        raise ParseError(f"{path}: key '{key}.rotation' must be a non-zero quaternion")
    try:
        return OrientedBox(
            center=center, rotation=quat_to_matrix(quat / norm), half_extents=half
        )
    except ValueError as err:
        raise ParseError(f"{path}: {key}: {err}") from err


def load_scene_file(path: Path) -> SceneBundle:
    """Parse one scene file; every failure names the file and the key."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    version = _need(data, "schema_version", path)
    if version != SCHEMA_VERSION:
        raise ParseError(f"{path}: unsupported schema_version {version!r}")

    raw_objects = _need(data, "objects", path)
    if not isinstance(raw_objects, list) or not raw_objects:
        raise ParseError(f"{path}: key 'objects' must be a non-empty list")
    objects = []
    for i, raw in enumerate(raw_objects):
        key = f"objects[{i}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{path}: key '{key}' must be an object")
        label = _need(raw, "label", path)
        if not isinstance(label, str) or not label:
            raise ParseError(f"{path}: key '{key}.label' must be a non-empty string")
        color = raw.get("color", "")
        pattern = raw.get("pattern", "")
        if not isinstance(color, str) or not isinstance(pattern, str):
            raise ParseError(f"{path}: key '{key}': color/pattern must be strings")
        description = ObjectDescription(label=label, color=color, pattern=pattern)
        objects.append(
            SimObject(label, description, _box_from_mapping(raw, key, path))
        )

    target_label = _need(data, "target_label", path)
    if not isinstance(target_label, str):
        raise ParseError(f"{path}: key 'target_label' must be a string")
    table_height = _number(data.get("table_height", 0.0), "table_height", path)

    seed = data.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ParseError(f"{path}: key 'seed' must be an integer")

    sphere = None
    if data.get("sphere") is not None:
        raw_sphere = data["sphere"]
        center = _floats(
            _need(raw_sphere, "center", path), 3, "sphere.center", path
        )
        radius = _number(_need(raw_sphere, "radius", path), "sphere.radius", path)
        try:
            sphere = ViewSphere(center=center, radius=radius)
        except ValueError as err:
            raise ParseError(f"{path}: sphere: {err}") from err

    region_hint = None
    if data.get("region_hint") is not None:
        region_hint = _box_from_mapping(data["region_hint"], "region_hint", path)

    try:
        scene = GroundTruthScene(
            objects=tuple(objects),
            target_label=target_label,
            table_height=table_height,
        )
    except ValueError as err:
        raise ParseError(f"{path}: {err}") from err
    return SceneBundle(
        scene=scene, sphere=sphere, seed=seed, region_hint=region_hint
    )


# -- run-config files --------------------------------------------------------

_NOISE_KEYS = {
    "detection_noise": ("sigma_center", "drop_prob", "mislabel_prob"),
    "grasp_noise": ("sigma_contact", "kappa_obs", "q_visibility_gain", "base_q"),
}
_FLOAT_KEYS = (
    "gamma_d",
    "gamma_theta",
    "gamma_below",
    "gamma_hl",
    "proximity_expansion",
    "q_max",
    "kappa_max",
    "eps_stag",
    "tick_hz",
    "dbscan_eps",
    "disturb_prob",
    "collision_margin",
)
_INT_KEYS = ("max_steps", "max_ticks", "abort_limit", "dbscan_min_pts", "k_bins")
_STR_KEYS = ("kappa_mode", "theta_gate", "quality_fusion")
_KNOWN_KEYS = (
    set(_FLOAT_KEYS) | set(_INT_KEYS) | set(_STR_KEYS) | set(_NOISE_KEYS) | {"step"}
)


def _cfg_float(data: dict, key: str, default: float, source: str) -> float:
    if key not in data:
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{source}: key '{key}' must be a number")
    return float(value)


def _cfg_int(data: dict, key: str, default: int, source: str) -> int:
    if key not in data:
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{source}: key '{key}' must be an integer")
    return value


def _cfg_str(data: dict, key: str, default: str, source: str) -> str:
    if key not in data:
        return default
    value = data[key]
    if not isinstance(value, str):
        raise ConfigError(f"{source}: key '{key}' must be a string")
    return value


def _cfg_noise(data: dict, key: str, source: str) -> dict:
    value = data.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{source}: key '{key}' must be an object")
    for sub in value:
        if sub not in _NOISE_KEYS[key]:
            raise ConfigError(f"{source}: unknown key '{key}.{sub}'")
    return {
        sub: _cfg_float(value, sub, getattr(_noise_default(key), sub), source)
        for sub in _NOISE_KEYS[key]
    }


def _noise_default(key: str):
    return DetectionNoise() if key == "detection_noise" else GraspNoise()


def parse_config_data(data: dict, source: str) -> LoopConfig:
    """Build a LoopConfig from a flat mapping, rejecting unknown keys."""
    for key in data:
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{source}: unknown key '{key}'")

    step = None
    if data.get("step") is not None:
        step = _cfg_float(data, "step", 0.0, source)

    rel, fus, loop = RelationConfig(), FusionConfig(), LoopConfig()
    try:
        relation_cfg = RelationConfig(
            proximity_expansion=_cfg_float(
                data, "proximity_expansion", rel.proximity_expansion, source
            ),
            gamma_below=_cfg_float(data, "gamma_below", rel.gamma_below, source),
            gamma_hl=_cfg_float(data, "gamma_hl", rel.gamma_hl, source),
        )
        fusion_cfg = FusionConfig(
            gamma_d=_cfg_float(data, "gamma_d", fus.gamma_d, source),
            gamma_theta=_cfg_float(data, "gamma_theta", fus.gamma_theta, source),
            q_max=_cfg_float(data, "q_max", fus.q_max, source),
            kappa_max=_cfg_float(data, "kappa_max", fus.kappa_max, source),
            dbscan_eps=_cfg_float(data, "dbscan_eps", fus.dbscan_eps, source),
            dbscan_min_pts=_cfg_int(
                data, "dbscan_min_pts", fus.dbscan_min_pts, source
            ),
            k_bins=_cfg_int(data, "k_bins", fus.k_bins, source),
            kappa_mode=_cfg_str(data, "kappa_mode", fus.kappa_mode, source),
            theta_gate=_cfg_str(data, "theta_gate", fus.theta_gate, source),
            quality_fusion=_cfg_str(
                data, "quality_fusion", fus.quality_fusion, source
            ),
        )
        detection_noise = DetectionNoise(
            **_cfg_noise(data, "detection_noise", source)
        )
        grasp_noise = GraspNoise(**_cfg_noise(data, "grasp_noise", source))
        return LoopConfig(
            tick_hz=_cfg_float(data, "tick_hz", loop.tick_hz, source),
            max_ticks=_cfg_int(data, "max_ticks", loop.max_ticks, source),
            relation_cfg=relation_cfg,
            fusion_cfg=fusion_cfg,
            detection_noise=detection_noise,
            grasp_noise=grasp_noise,
            step=step,
            max_steps=_cfg_int(data, "max_steps", loop.max_steps, source),
            eps_stag=_cfg_float(data, "eps_stag", loop.eps_stag, source),
            disturb_prob=_cfg_float(data, "disturb_prob", loop.disturb_prob, source),
            abort_limit=_cfg_int(data, "abort_limit", loop.abort_limit, source),
            collision_margin=_cfg_float(
                data, "collision_margin", loop.collision_margin, source
            ),
        )
    except ValueError as err:
        # dataclass validators name the offending parameter in the message
        raise ConfigError(f"{source}: {err}") from err


def load_config_file(path: Path) -> LoopConfig:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return parse_config_data(data, str(path))


def config_to_dict(cfg: LoopConfig) -> dict:
    """Flatten a LoopConfig to the run-config file mapping.

    parse_config_data(config_to_dict(cfg)) reproduces cfg exactly.
    """
    rel, fus = cfg.relation_cfg, cfg.fusion_cfg
    det, gra = cfg.detection_noise, cfg.grasp_noise
    return {
        "gamma_d": fus.gamma_d,
        "gamma_theta": fus.gamma_theta,
        "gamma_below": rel.gamma_below,
        "gamma_hl": rel.gamma_hl,
        "proximity_expansion": rel.proximity_expansion,
        "q_max": fus.q_max,
        "kappa_max": fus.kappa_max,
        "eps_stag": cfg.eps_stag,
        "step": cfg.step,
        "max_steps": cfg.max_steps,
        "tick_hz": cfg.tick_hz,
        "kappa_mode": fus.kappa_mode,
        "max_ticks": cfg.max_ticks,
        "disturb_prob": cfg.disturb_prob,
        "abort_limit": cfg.abort_limit,
        "collision_margin": cfg.collision_margin,
        "dbscan_eps": fus.dbscan_eps,
        "dbscan_min_pts": fus.dbscan_min_pts,
        "k_bins": fus.k_bins,
        "theta_gate": fus.theta_gate,
        "quality_fusion": fus.quality_fusion,
        "detection_noise": {
            "sigma_center": det.sigma_center,
            "drop_prob": det.drop_prob,
            "mislabel_prob": det.mislabel_prob,
        },
        "grasp_noise": {
            "sigma_contact": gra.sigma_contact,
            "kappa_obs": gra.kappa_obs,
            "q_visibility_gain": gra.q_visibility_gain,
            "base_q": gra.base_q,
        },
    }


# -- output writers ----------------------------------------------------------


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines))


def write_trajectory(path: Path, result: EpisodeResult) -> None:
    _write_lines(
        path,
        [
            render_json(
                {
                    "tick": p.tick,
                    "position": p.pose.position,
                    "orientation": p.pose.orientation,
                    "speed": p.speed,
                    "beta": p.beta,
                }
            )
            for p in result.trajectory
        ],
    )


def write_events(path: Path, result: EpisodeResult) -> None:
    _write_lines(
        path,
        [
            render_json(
                {
                    "tick": e.tick,
                    "kind": e.kind,
                    "label": e.label,
                    "value": e.value,
                    "flag": e.flag,
                }
            )
            for e in result.events
        ],
    )


def write_grasps(path: Path, result: EpisodeResult, fusion_cfg: FusionConfig) -> None:
    header = [
        "id", "cx", "cy", "cz", "mux", "muy", "muz",
        "kappa", "quality", "width",
    ] + [f"bin_{i}" for i in range(fusion_cfg.k_bins)]
    lines = [",".join(header)]
    for gid, grasp in result.grasps:
        mu = grasp.mu
        direction = [0.0, 0.0, 0.0] if mu is None else list(mu)
        cells = (
            [str(gid)]
            + [fmt_float(v) for v in grasp.contact]
            + [fmt_float(v) for v in direction]
            + [
                fmt_float(grasp.kappa(fusion_cfg.kappa_mode)),
                fmt_float(grasp.quality),
                fmt_float(grasp.width),
            ]
            + [fmt_float(v) for v in grasp.approach_bins]
        )
        lines.append(",".join(cells))
    _write_lines(path, lines)


def write_metrics(path: Path, result: EpisodeResult) -> None:
    gsr = (
        result.grasps_succeeded / result.grasps_attempted
        if result.grasps_attempted > 0
        else None
    )
    _write_lines(
        path,
        [
            render_json(
                {"FS": result.final_success, "#GA": result.grasp_attempts, "GSR": gsr}
            )
        ],
    )


def write_episode_outputs(
    out_dir: Path, result: EpisodeResult, cfg: LoopConfig
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trajectory(out_dir / "trajectory.jsonl", result)
    write_grasps(out_dir / "grasps.csv", result, cfg.fusion_cfg)
    write_events(out_dir / "events.jsonl", result)
    write_metrics(out_dir / "metrics.json", result)


# -- commands ----------------------------------------------------------------


def resolve_seed(flag_seed: int | None, scene_seed: int | None) -> int:
    """--seed flag, then the VISO_SEED environment variable, then the
    scene file's seed, then 0."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{ENV_SEED}: invalid integer {env!r}") from None
    if scene_seed is not None:
        return scene_seed
    return 0


def cmd_run(args) -> int:
    bundle = load_scene_file(Path(args.scene))
    cfg = load_config_file(Path(args.config))
    seed = resolve_seed(args.seed, bundle.seed)
    result = run_episode(
        bundle.scene, cfg, seed, bundle.sphere, bundle.region_hint
    )
    write_episode_outputs(Path(args.out), result, cfg)
    return 0


def cmd_suite(args) -> int:
    scene_dir = Path(args.scene_dir)
    paths = sorted(scene_dir.glob("*.json"))
    if not paths:
        raise ParseError(f"{scene_dir}: no scene files (*.json)")
    cfg = load_config_file(Path(args.config))
    out_root = Path(args.out)
    results = []
    for path in paths:
        bundle = load_scene_file(path)
        for seed in range(args.seeds):
            result = run_episode(
                bundle.scene, cfg, seed, bundle.sphere, bundle.region_hint
            )
            write_episode_outputs(out_root / path.stem / f"seed_{seed}", result, cfg)
            results.append(result)
    metrics = aggregate(results)
    out_root.mkdir(parents=True, exist_ok=True)
    _write_lines(
        out_root / "suite_metrics.json",
        [
            render_json(
                {"AFSR": metrics.afsr, "#AGA": metrics.aga, "AGSR": metrics.agsr}
            )
        ],
    )
    return 0


def cmd_field(args) -> int:
    bundle = load_scene_file(Path(args.scene))
    scene = bundle.scene
    sphere = bundle.sphere if bundle.sphere is not None else derive_view_sphere(scene)
    occluders = [
        o.box for o in scene.objects if o.label != scene.target_label
    ]
    if not occluders:
        raise ParseError(
            f"{args.scene}: field export needs at least one non-target object"
        )
    occ = OccluderPoints.from_boxes(occluders)
    p_target = scene.target().box.center
    n = args.grid
    lines = ["px,py,pz,vx,vy,vz,beta,truncated"]
    for i in range(n):
        elevation = -math.pi / 2 + (i + 0.5) * math.pi / n
        for j in range(n):
            azimuth = 2.0 * math.pi * j / n
            direction = np.array(
                [
                    math.cos(elevation) * math.cos(azimuth),
                    math.cos(elevation) * math.sin(azimuth),
                    math.sin(elevation),
                ]
            )
            x = sphere.center + sphere.radius * direction
            sample = truncate_downward(
                field_multi(x, sphere, p_target, occ), x, sphere
            )
            cells = (
                [fmt_float(v) for v in x]
                + [fmt_float(v) for v in sample.velocity]
                + [fmt_float(sample.beta), str(int(sample.truncated))]
            )
            lines.append(",".join(cells))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_lines(out_dir / "field.csv", lines)
    return 0


# -- entry point -------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbvgrasp",
        description="Target-guided view planning and grasp fusion episodes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one episode")
    run_p.add_argument("scene", help="scene file (JSON)")
    run_p.add_argument("config", help="run-config file (JSON)")
    run_p.add_argument("--seed", type=int, default=None, help="episode seed")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.set_defaults(func=cmd_run)

    suite_p = sub.add_parser("suite", help="run every scene in a directory")
    suite_p.add_argument("scene_dir", help="directory of scene files")
    suite_p.add_argument("config", help="run-config file (JSON)")
    suite_p.add_argument(
        "--seeds", type=_positive_int, default=1, help="number of seeds per scene"
    )
    suite_p.add_argument("--out", default="out", help="output directory")
    suite_p.set_defaults(func=cmd_suite)

    field_p = sub.add_parser("field", help="export the velocity field grid")
    field_p.add_argument("scene", help="scene file (JSON)")
    field_p.add_argument(
        "--grid", type=_positive_int, default=DEFAULT_GRID, help="grid resolution"
    )
    field_p.add_argument("--out", default=".", help="output directory")
    field_p.set_defaults(func=cmd_field)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
