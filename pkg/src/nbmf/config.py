"""Experiment configuration: JSON parsing, validation and scenario presets.

A config file is a single JSON object. Validation errors carry the line of
the offending key so a hand-edited file can be fixed quickly.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .geometry import ScanGeometry, uniform_angles
from .phantom import Phantom, build_thorax_like_phantom
from .spectra import (EnergyGrid, bundled_material, load_attenuation_table, load_spectrum_table,
                      synth_spectrum)
from .trainer import TrainConfig

SCENARIOS = ("noise_free", "sparse", "poisson", "geo_inconsistent", "single_spectrum", "highres", "smoke")
SCALES = ("paper", "desk")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` is 1-based or ``None``."""

    def __init__(self, msg: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<config>'}:{line}: " if line else (f"{source}: " if source else "")
        super().__init__(where + msg)
        self.line = line


def _key_line(text: str | None, path: tuple) -> int | None:
    """Line of the last key in ``path``, found by walking the keys in order."""
    if not text:
        return None
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        i = text.find(f'"{key}"', pos)
        if i < 0:
            break
        pos = i + 1
        found = text.count("\n", 0, i) + 1
    return found


_BLOCK_KEYS = {
    "": {"scenario", "scale", "output_dir", "geometry", "energy_grid", "spectra", "materials", "phantom",
         "simulate", "noise", "train", "evaluate"},
    "geometry": {"sod_mm", "sdd_mm", "n_det", "det_size_mm", "views", "sparse_views"},
    "energy_grid": {"e_min", "e_max", "delta_e"},
    "simulate": {"step_mm"},
    "noise": {"i0", "seed"},
    "evaluate": {"resolution", "rows", "highres"},
    "phantom": {"builtin", "path"},
}
_SPECTRUM_KEYS = {"label", "kvp", "filter", "filter_cm", "table"}
_MATERIAL_KEYS = {"name", "table", "density"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (all defaults expanded)."""

    scenario: str
    scale: str
    output_dir: str
    geometry: dict
    energy_grid: dict
    spectra: list
    materials: list
    phantom: dict
    simulate: dict
    noise: dict | None
    train: TrainConfig
    evaluate: dict
    base_dir: str = "."

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, text: str | None = None, source: str | None = None,
                  base_dir: str | Path = ".") -> "ExperimentConfig":
        def fail(msg, *path):
            raise ConfigError(msg, _key_line(text, path), source)

        if not isinstance(raw, dict):
            raise ConfigError("top level must be a JSON object", 1, source)
        for block, allowed in _BLOCK_KEYS.items():
            obj = raw if block == "" else raw.get(block)
            if isinstance(obj, dict):
                for key in obj:
                    if key not in allowed:
                        fail(f"unknown key '{key}'" + (f" in '{block}'" if block else ""),
                             *((block,) if block else ()), key)
        scenario = raw.get("scenario", "noise_free")
        if scenario not in SCENARIOS:
            fail(f"scenario must be one of {', '.join(SCENARIOS)}", "scenario")
        scale = raw.get("scale", "desk")
        if scale not in SCALES:
            fail(f"scale must be one of {', '.join(SCALES)}", "scale")
        base = preset(scenario, scale)
        merged = _merge(base, raw)

        for i, s in enumerate(merged["spectra"]):
            if not isinstance(s, dict):
                fail(f"spectra[{i}] must be an object", "spectra")
            for key in s:
                if key not in _SPECTRUM_KEYS:
                    fail(f"unknown key '{key}' in spectra[{i}]", "spectra", key)
            if "table" not in s and "kvp" not in s:
                fail(f"spectra[{i}] needs either 'kvp' or 'table'", "spectra")
        for i, m in enumerate(merged["materials"]):
            if not isinstance(m, dict) or "name" not in m:
                fail(f"materials[{i}] needs a 'name'", "materials")
            for key in m:
                if key not in _MATERIAL_KEYS:
                    fail(f"unknown key '{key}' in materials[{i}]", "materials", key)
        tr = merged["train"]
        for key in tr:
            if key not in _TRAIN_KEYS:
                fail(f"unknown key '{key}' in 'train'", "train", key)
        try:
            train = TrainConfig(**tr)
        except (TypeError, ValueError) as exc:
            fail(str(exc), "train")

        cfg = cls(scenario, scale, str(merged["output_dir"]), merged["geometry"], merged["energy_grid"],
                  merged["spectra"], merged["materials"], merged["phantom"], merged["simulate"],
                  merged["noise"], train, merged["evaluate"], str(base_dir))
        try:
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc), _key_line(text, exc.path) if hasattr(exc, "path") else None,
                              source) from None
        return cfg

    @classmethod
    def from_json(cls, text: str, source: str | None = None, base_dir: str | Path = ".") -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source) from None
        return cls.from_dict(raw, text, source, base_dir)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
        return cls.from_json(text, str(path), path.parent)

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``dotted.key=value`` overrides to scalar fields."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override '{item}' must look like key=value")
            key, val = item.split("=", 1)
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override '{key}': '{p}' is not a config block")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"override '{key}': unknown field")
            if isinstance(node[parts[-1]], (dict, list)):
                raise ConfigError(f"override '{key}': only scalar fields can be set from the command line")
            try:
                node[parts[-1]] = json.loads(val)
            except json.JSONDecodeError:
                node[parts[-1]] = val
        return ExperimentConfig.from_dict(d, base_dir=self.base_dir)

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        def bad(msg, *path):
            err = ConfigError(msg)
            err.path = path
            raise err

        g = self.geometry
        for key in ("sod_mm", "sdd_mm", "n_det", "det_size_mm", "views"):
            if not isinstance(g.get(key), (int, float)) or g[key] <= 0:
                bad(f"geometry.{key} must be a positive number", "geometry", key)
        if g["sdd_mm"] <= g["sod_mm"]:
            bad("geometry.sdd_mm must exceed sod_mm", "geometry", "sdd_mm")
        K, M = len(self.spectra), len(self.materials)
        if K < 1:
            bad("at least one spectrum is required", "spectra")
        if M < 1:
            bad("at least one material is required", "materials")
        if self.scenario == "sparse":
            sv = g.get("sparse_views")
            if not isinstance(sv, int) or sv < 1 or g["views"] % sv:
                bad("sparse scenario needs geometry.sparse_views dividing geometry.views", "geometry",
                    "sparse_views")
        if self.scenario == "geo_inconsistent" and K != 2:
            bad("geo_inconsistent needs exactly two spectra (even/odd interleave)", "spectra")
        if self.scenario == "single_spectrum" and K != 1:
            bad("single_spectrum needs exactly one spectrum", "spectra")
        if self.scenario == "poisson" and not self.noise:
            bad("poisson scenario needs a noise block", "noise")
        if self.noise is not None:
            if not isinstance(self.noise.get("i0"), (int, float)) or not self.noise["i0"] > 0:
                bad("noise.i0 must be positive", "noise", "i0")
            if not isinstance(self.noise.get("seed"), int):
                bad("noise.seed must be an integer", "noise", "seed")
        for i, s in enumerate(self.spectra):
            if "table" in s and not self._path(s["table"]).is_file():
                bad(f"spectra[{i}].table: file not found: {s['table']}", "spectra", "table")
        for i, m in enumerate(self.materials):
            if "table" in m and not self._path(m["table"]).is_file():
                bad(f"materials[{i}].table: file not found: {m['table']}", "materials", "table")
        ph = self.phantom
        if "path" in ph:
            if not self._path(ph["path"]).is_file():
                bad(f"phantom.path: file not found: {ph['path']}", "phantom", "path")
        elif ph.get("builtin") != "thorax":
            bad("phantom needs 'path' or builtin 'thorax'", "phantom")
        elif M != 2:
            bad("the builtin thorax phantom has two materials", "materials")
        ev = self.evaluate
        if not isinstance(ev.get("resolution"), int) or ev["resolution"] < 11:
            bad("evaluate.resolution must be an integer >= 11", "evaluate", "resolution")
        for r in ev.get("rows", []):
            if not isinstance(r, int) or not 0 <= r < ev["resolution"]:
                bad(f"evaluate.rows entry {r} outside the image", "evaluate", "rows")
        try:
            self.build_grid()
        except ValueError as exc:
            bad(str(exc), "energy_grid")

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- builders -------------------------------------------------------------
    def angle_sets(self) -> tuple:
        g = self.geometry
        n, K = int(g["views"]), len(self.spectra)
        if self.scenario == "sparse":
            sv = int(g["sparse_views"])
            return tuple(uniform_angles(sv, 0, n // sv, n) for _ in range(K))
        if self.scenario == "geo_inconsistent":
            return tuple(uniform_angles(n, k, 2, 2 * n + 1) for k in range(2))
        return tuple(uniform_angles(n) for _ in range(K))

    def build_geometry(self) -> ScanGeometry:
        g = self.geometry
        return ScanGeometry(float(g["sod_mm"]), float(g["sdd_mm"]), int(g["n_det"]), float(g["det_size_mm"]),
                            self.angle_sets())

    def build_grid(self) -> EnergyGrid:
        e = self.energy_grid
        return EnergyGrid(float(e["e_min"]), float(e["e_max"]), float(e["delta_e"]))

    def build_spectra(self) -> list:
        grid = self.build_grid()
        out = []
        for i, s in enumerate(self.spectra):
            label = s.get("label", f"spectrum{i}")
            if "table" in s:
                out.append(load_spectrum_table(self._path(s["table"]), grid, label))
            else:
                out.append(synth_spectrum(float(s["kvp"]), grid, s.get("filter"), float(s.get("filter_cm", 0.0)),
                                          label))
        return out

    def build_materials(self) -> list:
        grid = self.build_grid()
        out = []
        for m in self.materials:
            if "table" in m:
                out.append(load_attenuation_table(self._path(m["table"]), grid, m["name"], m.get("density")))
            else:
                out.append(bundled_material(m["name"], grid))
        return out

    def build_phantom(self) -> Phantom:
        if "path" in self.phantom:
            return Phantom.load(self._path(self.phantom["path"]))
        return build_thorax_like_phantom(len(self.materials))

    def simulation_step(self, geom: ScanGeometry) -> float:
        """The training step unless ``simulate.step_mm`` sets an independent one."""
        step = self.simulate.get("step_mm")
        return float(step) if step is not None else self.train.resolved_step(geom)

    def to_dict(self) -> dict:
        d = {"scenario": self.scenario, "scale": self.scale, "output_dir": self.output_dir,
             "geometry": dict(self.geometry), "energy_grid": dict(self.energy_grid),
             "spectra": [dict(s) for s in self.spectra], "materials": [dict(m) for m in self.materials],
             "phantom": dict(self.phantom), "simulate": dict(self.simulate),
             "noise": dict(self.noise) if self.noise else None,
             "train": asdict(self.train), "evaluate": copy.deepcopy(self.evaluate)}
        d["train"]["hidden"] = list(self.train.hidden)
        d["train"]["skip_at"] = list(self.train.skip_at)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


# -- presets --------------------------------------------------------------------

PAPER_GEOMETRY = {"sod_mm": 1000.0, "sdd_mm": 1536.0, "n_det": 512, "det_size_mm": 0.8, "views": 720,
                  "sparse_views": None}
DESK_GEOMETRY = {"sod_mm": 1000.0, "sdd_mm": 1536.0, "n_det": 128, "det_size_mm": 3.2, "views": 180,
                 "sparse_views": None}
SMOKE_GEOMETRY = {"sod_mm": 1000.0, "sdd_mm": 1536.0, "n_det": 32, "det_size_mm": 12.8, "views": 36,
                  "sparse_views": None}

_DUAL_SPECTRA = [{"label": "80kVp", "kvp": 80, "filter": "aluminium", "filter_cm": 0.25},
                 {"label": "140kVp", "kvp": 140, "filter": "copper", "filter_cm": 0.1}]

_PAPER_TRAIN = {"epochs": 1200, "rays_per_batch": 1024, "step_mm": 0.2581, "n_grid": 512,
                "learning_rate": 1e-3, "precision": "float64", "hidden": [256] * 8, "skip_at": [4],
                "d_freq": 8, "head_scale": 1.0, "chunk_rays": 64}

# Desk scale trades network size and samples per ray for wall-clock time; the
# step is two pixels of the 128 grid (half a pixel of a 32 grid).
_DESK_TRAIN = {"epochs": 500, "rays_per_batch": 128, "step_mm": None, "n_grid": 32,
               "learning_rate": 1e-2, "precision": "float32", "hidden": [32, 32, 32], "skip_at": [],
               "d_freq": 8, "head_scale": 0.1, "chunk_rays": 64}

_SMOKE_TRAIN = {"epochs": 200, "rays_per_batch": 128, "step_mm": None, "n_grid": 16,
                "learning_rate": 3e-3, "precision": "float64", "hidden": [32, 32], "skip_at": [],
                "d_freq": 4, "head_scale": 0.1, "chunk_rays": 128, "seed": 5}


def preset(scenario: str, scale: str = "desk") -> dict:
    """Default config dictionary for one experiment regime."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{scenario}'")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale '{scale}'")
    if scenario == "smoke":
        geom, train, res = dict(SMOKE_GEOMETRY), dict(_SMOKE_TRAIN), 32
    elif scale == "paper":
        geom, train, res = dict(PAPER_GEOMETRY), dict(_PAPER_TRAIN), 512
    else:
        geom, train, res = dict(DESK_GEOMETRY), dict(_DESK_TRAIN), 128
    spectra = copy.deepcopy(_DUAL_SPECTRA)
    noise = None
    if scenario == "sparse":
        geom["sparse_views"] = geom["views"] // 6
    elif scenario == "poisson":
        noise = {"i0": 1e6, "seed": 1}
    elif scenario == "single_spectrum":
        spectra = spectra[:1]  # 80 kVp: the stronger beam hardening
    # profile row: the analogue of row 290 of a 512 image
    row = int(math.floor(290 * res / 512))
    highres = []
    if scenario in ("noise_free", "highres", "smoke"):
        highres = [1024, 2048] if res == 512 else [2 * res, 4 * res]
    return {
        "scenario": scenario,
        "scale": scale,
        "output_dir": f"runs/{scenario}_{scale}",
        "geometry": geom,
        "energy_grid": {"e_min": 10.0, "e_max": 150.0, "delta_e": 1.0},
        "spectra": spectra,
        "materials": [{"name": "water"}, {"name": "bone"}],
        "phantom": {"builtin": "thorax"},
        "simulate": {"step_mm": None},
        "noise": noise,
        "train": train,
        "evaluate": {"resolution": res, "rows": [row], "highres": highres},
    }
