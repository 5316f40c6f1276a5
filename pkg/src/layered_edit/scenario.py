"""Scenario files: a small TOML schema for edit scenarios.

Example::

    [grid]
    height = 16
    width = 16
    channels = 32
    # source = "source.lgrd"        optional; otherwise synthesised from the seed

    [schedule]
    steps = 50

    [prompts]
    source = [1, 10, 11]
    edit = [1, 20, 11]

    [[objects]]
    source_tokens = [10]
    edit_tokens = [20]
    rect = [2, 6, 2, 6]             # rows 2..5, cols 2..5; or mask = "obj0.lmsk"
    # move = [0, 4]  or  resize = 1.5

    [[panoptic]]
    rect = [2, 6, 2, 6]
    # token = 10                    paints the region in a synthesised source

    [hyperparameters]
    eta = 0.3
    k = 5.0

    [seed]
    value = 0

Mask paths are resolved relative to the scenario file.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .grid import ParameterError
from .gridio import read_grid, read_mask, write_grid, write_mask
from .layers import EditScenario, ObjectSpec, PanopticRegion

REQUIRED_SECTIONS = ("grid", "prompts")
SCHEDULE_KEYS = ("steps", "beta_start", "beta_end")
HYPER_KEYS = (
    "eta", "k", "t_query", "t_key", "guidance", "inversion_guidance", "inversion_refine", "tau_step",
    "tau_iterations", "tau_seed", "tau_band", "containment",
)
SUBSTRATE_KEYS = ("cross_gain", "out_gain", "temb_gain")
INT_KEYS = {"steps", "t_query", "t_key", "inversion_refine", "tau_iterations", "tau_band"}


class ScenarioError(ParameterError):
    """Invalid scenario; ``errors`` lists one message per offending field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _mask_from(entry: dict, where: str, base: Path, shape, errors: list):
    if "rect" in entry:
        r = entry["rect"]
        if len(r) != 4:
            errors.append(f"{where}.rect: expected [r0, r1, c0, c1]")
            return None
        m = np.zeros(shape)
        m[r[0]:r[1], r[2]:r[3]] = 1.0
        return m
    if "mask" in entry:
        try:
            m = read_mask(base / entry["mask"])
        except (OSError, ParameterError) as exc:
            errors.append(f"{where}.mask: {exc}")
            return None
        if m.shape != tuple(shape):
            errors.append(f"{where}.mask: shape {m.shape} does not match grid {tuple(shape)}")
            return None
        return m
    errors.append(f"{where}: needs 'rect' or 'mask'")
    return None


def parse_scenario(doc: dict, base: Path = Path("."), overrides: dict | None = None) -> EditScenario:
    """Build and validate a scenario from a parsed TOML document."""
    errors = [f"missing section [{name}]" for name in REQUIRED_SECTIONS if name not in doc]
    if errors:
        raise ScenarioError(errors)
    grid, prompts = doc["grid"], doc["prompts"]
    kwargs = {}
    for key in ("height", "width"):
        if key not in grid:
            errors.append(f"grid.{key}: missing")
    for key in ("source", "edit"):
        if key not in prompts:
            errors.append(f"prompts.{key}: missing")
    if errors:
        raise ScenarioError(errors)
    h, w = int(grid["height"]), int(grid["width"])
    if "channels" in grid:
        kwargs["channels"] = int(grid["channels"])
    for key in SCHEDULE_KEYS:
        if key in doc.get("schedule", {}):
            kwargs[key] = doc["schedule"][key]
    for key in HYPER_KEYS:
        if key in doc.get("hyperparameters", {}):
            kwargs[key] = doc["hyperparameters"][key]
    for key in SUBSTRATE_KEYS:
        if key in doc.get("substrate", {}):
            kwargs[key] = doc["substrate"][key]
    if "value" in doc.get("seed", {}):
        kwargs["seed"] = int(doc["seed"]["value"])
    kwargs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in INT_KEYS & kwargs.keys():
        kwargs[key] = int(kwargs[key])

    objects = []
    for i, entry in enumerate(doc.get("objects", [])):
        mask = _mask_from(entry, f"objects[{i}]", base, (h, w), errors)
        move = entry.get("move")
        if move is not None and len(move) != 2:
            errors.append(f"objects[{i}].move: expected [dh, dw]")
        objects.append(ObjectSpec(
            tuple(int(t) for t in entry.get("source_tokens", [])),
            tuple(int(t) for t in entry.get("edit_tokens", [])),
            mask if mask is not None else np.zeros((h, w)),
            tuple(int(v) for v in move) if move is not None else None,
            float(entry["resize"]) if "resize" in entry else None,
        ))
    panoptic = []
    for j, entry in enumerate(doc.get("panoptic", [])):
        mask = _mask_from(entry, f"panoptic[{j}]", base, (h, w), errors)
        panoptic.append(PanopticRegion(mask if mask is not None else np.zeros((h, w)), entry.get("token")))
    if "source" in grid:
        try:
            kwargs["source"] = read_grid(base / grid["source"])
        except (OSError, ParameterError) as exc:
            errors.append(f"grid.source: {exc}")
    if errors:
        raise ScenarioError(errors)

    scenario = EditScenario(h, w, tuple(int(t) for t in prompts["source"]),
                            tuple(int(t) for t in prompts["edit"]), objects, panoptic, **kwargs)
    try:
        msgs = scenario.validate()
    except ParameterError as exc:
        raise ScenarioError(str(exc).split("; ")) from None
    for msg in msgs:
        warnings.warn(msg, stacklevel=3)
    return scenario


def load_scenario(path, overrides: dict | None = None) -> EditScenario:
    path = Path(path)
    with path.open("rb") as fh:
        doc = tomli.load(fh)
    return parse_scenario(doc, path.parent, overrides)


def scenario_document(scenario: EditScenario, mask_dir: str) -> tuple[dict, dict]:
    """TOML document for ``scenario`` plus the mask files it references.

    Returns ``(doc, files)`` where ``files`` maps relative paths to arrays
    (masks, and the source grid if the scenario carries one).
    """
    files = {}
    grid = {"height": scenario.height, "width": scenario.width, "channels": scenario.channels}
    if scenario.source is not None:
        grid["source"] = f"{mask_dir}/source.lgrd"
        files[grid["source"]] = scenario.source
    doc = {
        "grid": grid,
        "schedule": {k: getattr(scenario, k) for k in SCHEDULE_KEYS},
        "prompts": {"source": list(scenario.source_prompt), "edit": list(scenario.edit_prompt)},
        "hyperparameters": {k: getattr(scenario, k) for k in HYPER_KEYS},
        "substrate": {k: getattr(scenario, k) for k in SUBSTRATE_KEYS},
        "seed": {"value": scenario.seed},
    }
    objects = []
    for i, obj in enumerate(scenario.objects):
        rel = f"{mask_dir}/object{i}.lmsk"
        files[rel] = obj.mask
        entry = {"source_tokens": list(obj.source_tokens), "edit_tokens": list(obj.edit_tokens), "mask": rel}
        if obj.move is not None:
            entry["move"] = list(obj.move)
        if obj.resize is not None:
            entry["resize"] = obj.resize
        objects.append(entry)
    panoptic = []
    for j, region in enumerate(scenario.panoptic):
        rel = f"{mask_dir}/panoptic{j}.lmsk"
        files[rel] = region.mask
        entry = {"mask": rel}
        if region.token is not None:
            entry["token"] = region.token
        panoptic.append(entry)
    if objects:
        doc["objects"] = objects
    if panoptic:
        doc["panoptic"] = panoptic
    return doc, files


def save_scenario(scenario: EditScenario, path) -> Path:
    """Write ``scenario`` as TOML with its masks in a sibling directory."""
    path = Path(path)
    mask_dir = f"{path.stem}_masks"
    doc, files = scenario_document(scenario, mask_dir)
    (path.parent / mask_dir).mkdir(parents=True, exist_ok=True)
    for rel, arr in files.items():
        if rel.endswith(".lgrd"):
            write_grid(path.parent / rel, arr)
        else:
            write_mask(path.parent / rel, arr)
    path.write_text(tomli_w.dumps(doc))
    return path


def scenarios_equal(a: EditScenario, b: EditScenario) -> bool:
    """Field-by-field equality, comparing arrays by value."""
    da, fa = scenario_document(a, "m")
    db, fb = scenario_document(b, "m")
    if da != db or fa.keys() != fb.keys():
        return False
    return all(np.array_equal(fa[k], fb[k]) for k in fa)
