"""Scenario files: everything needed to assemble episodes and problems."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .harness import HarnessConfig, ImpedanceParams, config_from_code, load_layout, pelvis_impedance
from .human_reference import EpisodeWindow, HumanModel, anthropometrics_for, load_gait, synthetic_gait
from .model import INTERFACES, Anthropometrics, ExoLayout, build_exoskeleton, load_model
from .optimizer import OptimizationProblem, problem_from_settings
from .simulation import EpisodeSpec

FORMAT_VERSION = 1
CONSTRAINT_NOTE = (
    "distance constraint: a sample violates when distance - threshold >= 0, "
    "counted per (instant, component) over the six limb interfaces"
)

DEFAULTS = {
    "format_version": FORMAT_VERSION,
    "model": {"percentile": "p50", "total_mass": 19.0, "layout": {}},
    "gait": {"synthetic": {"cadence": 110.0, "amplitude": 1.0, "sample_rate": 240.0}},
    "harness": "[0 1 0]",
    "impedance": {"source": "anchor"},
    "perturbation": {"gamma": 0.0, "snr_db": None},
    "simulation": {
        "dt": 1e-3,
        "scheme": "semi_implicit",
        "policy": "gravity",
        "window": {"stance": [12.0, 50.0], "swing": [62.0, 100.0]},
        "discard": 0.05,
        "pelvis": {"k_trans": 1e4, "k_rot": 500.0},
    },
    "problem": {},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("gait", "impedance"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def derive_seeds(root: int) -> dict:
    """Split the root seed into noise, perturbation and optimizer seeds."""
    children = np.random.SeedSequence(int(root)).spawn(3)
    vals = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
    return dict(zip(("noise", "perturbation", "optimizer"), vals))


@dataclass
class Scenario:
    config: dict
    base_dir: Path
    seed: int = 0

    @classmethod
    def from_file(cls, path, seed: int = 0, overrides: dict | None = None) -> Scenario:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, path.parent, seed, overrides)

    @classmethod
    def from_dict(cls, data: dict | None, base_dir=".", seed: int = 0, overrides: dict | None = None) -> Scenario:
        data = dict(data or {})
        version = data.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported scenario format_version {version!r}")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        cfg = _merge(DEFAULTS, data)
        if overrides:
            cfg = _merge(cfg, overrides)
        sc = cls(cfg, Path(base_dir), int(seed))
        sc.validate()
        return sc

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- resolution ---------------------------------------------------------

    def validate(self) -> None:
        cfg = self.config
        gait = cfg["gait"]
        if not isinstance(gait, dict) or len(set(gait) & {"synthetic", "file"}) != 1:
            raise ConfigError("gait must name exactly one source: 'synthetic' or 'file'")
        if "file" in gait and not self._path(gait["file"]).exists():
            raise ConfigError(f"gait file not found: {self._path(gait['file'])}")
        model = cfg["model"]
        if "file" in model and not self._path(model["file"]).exists():
            raise ConfigError(f"model file not found: {self._path(model['file'])}")
        h = cfg["harness"]
        if isinstance(h, dict) and "file" in h and not self._path(h["file"]).exists():
            raise ConfigError(f"harness layout file not found: {self._path(h['file'])}")
        src = cfg["impedance"].get("source")
        if src not in ("explicit", "anchor", "optimize"):
            raise ConfigError("impedance source must be 'explicit', 'anchor' or 'optimize'")
        if src == "explicit" and "values" not in cfg["impedance"]:
            raise ConfigError("explicit impedance source needs 'values'")
        # resolve everything once so errors surface here
        try:
            self.harness()
            self.anthropometrics()
            self.window()
            pert = cfg["perturbation"]
            if pert.get("gamma", 0.0) < 0:
                raise ConfigError("perturbation gamma must be >= 0")
            if src == "explicit":
                self.explicit_impedances()
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def harness(self, code=None) -> HarnessConfig:
        h = code if code is not None else self.config["harness"]
        if isinstance(h, HarnessConfig):
            return h
        if isinstance(h, dict):
            if "file" in h:
                return load_layout(self._path(h["file"]))
            return HarnessConfig.from_dict(h)
        return config_from_code(h)

    def anthropometrics(self) -> Anthropometrics:
        m = self.config["model"]
        if "file" in m:
            tree = load_model(self._path(m["file"]))
            return Anthropometrics(**tree.metadata.get("anthropometrics", {}))
        if "anthropometrics" in m:
            return Anthropometrics(**m["anthropometrics"])
        return anthropometrics_for(str(m.get("percentile", "p50")))

    def layout(self) -> ExoLayout:
        m = self.config["model"]
        if "file" in m:
            tree = load_model(self._path(m["file"]))
            return ExoLayout.from_dict(tree.metadata.get("layout"))
        return ExoLayout.from_dict(m.get("layout"))

    def tree(self):
        m = self.config["model"]
        if "file" in m:
            return load_model(self._path(m["file"]))
        return build_exoskeleton(self.anthropometrics(), float(m.get("total_mass", 19.0)), self.layout())

    def gait(self):
        g = self.config["gait"]
        if "file" in g:
            return load_gait(self._path(g["file"]))
        s = dict(g["synthetic"])
        return synthetic_gait(
            cadence=float(s.get("cadence", 110.0)),
            amplitude_profile=s.get("amplitude", 1.0),
            sample_rate=float(s.get("sample_rate", 240.0)),
            seed=s.get("seed"),
        )

    def window(self) -> EpisodeWindow:
        w = self.config["simulation"]["window"]
        return EpisodeWindow(tuple(w["stance"]), tuple(w["swing"]))

    def seeds(self) -> dict:
        return derive_seeds(self.seed)

    def explicit_impedances(self) -> dict:
        vals = self.config["impedance"]["values"]
        out = {}
        for iface in INTERFACES:
            entry = vals.get(iface, vals.get(iface.split("_")[0]))
            if entry is None:
                raise ConfigError(f"explicit impedance missing for {iface}")
            out[iface] = ImpedanceParams(entry["K"], entry["D"])
        return out

    def episode(self, code=None, impedances: dict | None = None) -> EpisodeSpec:
        cfg = self.config
        sim = cfg["simulation"]
        pert = cfg["perturbation"]
        seeds = self.seeds()
        snr = pert.get("snr_db")
        pel = sim.get("pelvis", {})
        spec = EpisodeSpec(
            tree=self.tree(),
            human=HumanModel(self.anthropometrics(), self.layout()),
            harness=self.harness(code),
            impedances=impedances or {f: ImpedanceParams() for f in INTERFACES},
            gait=self.gait(),
            pelvis=pelvis_impedance(pel.get("k_trans", 1e4), pel.get("k_rot", 500.0)),
            policy=sim["policy"],
            dt=float(sim["dt"]),
            window=self.window(),
            scheme=sim["scheme"],
            snr_db=math.inf if snr is None else float(snr),
            gamma=float(pert.get("gamma", 0.0)),
            noise_seed=seeds["noise"],
            perturb_seed=seeds["perturbation"],
            discard=float(sim["discard"]),
        )
        if impedances is None:
            spec = replace(spec, impedances=self.initial_impedances(spec))
        return spec

    def problem(self, harness: HarnessConfig) -> OptimizationProblem:
        settings = dict(self.config.get("problem", {}))
        settings.setdefault("seed", self.seeds()["optimizer"])
        return problem_from_settings(harness, settings)

    def initial_impedances(self, spec: EpisodeSpec) -> dict:
        src = self.config["impedance"]["source"]
        if src == "explicit":
            return self.explicit_impedances()
        prob = self.problem(spec.harness)
        return prob.impedances(prob.to_physical(np.full(prob.dim, prob.anchor)))

    def resolved(self) -> dict:
        """Provenance block: the merged config plus derived seeds."""
        return {"config": self.config, "root_seed": self.seed, "seeds": self.seeds(), "constraint": CONSTRAINT_NOTE}
