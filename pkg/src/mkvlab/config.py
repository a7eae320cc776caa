"""Experiment configuration, content hashing and built-in presets."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from .sim import SimConfig

KINDS = ("simulate", "verify", "qv", "nscale", "chaos", "density", "blowup", "mollify", "assumptions")


class KindSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    params: dict[str, Any] = Field(default_factory=dict)


class CoefficientSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drift: KindSpec = Field(default_factory=lambda: KindSpec(kind="zero"))
    sigma: KindSpec = Field(default_factory=lambda: KindSpec(kind="constant", params={"value": 1.0}))
    sigma_bar: KindSpec = Field(default_factory=lambda: KindSpec(kind="zero"))


class ExperimentConfig(BaseModel):
    """One experiment: what to run, on which system, with which test functions."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["simulate", "verify", "qv", "nscale", "chaos", "density", "blowup", "mollify", "assumptions"]
    name: str = ""
    sim: SimConfig = Field(default_factory=SimConfig)
    coefficients: CoefficientSpec = Field(default_factory=CoefficientSpec)
    test_functions: list[KindSpec] = Field(default_factory=list)
    params: dict[str, Any] = Field(default_factory=dict)
    output_dir: str | None = None
    workers: int | None = Field(None, ge=1)

    def hashed_content(self) -> dict:
        return self.model_dump(mode="json", exclude={"output_dir", "workers"})

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form, ignoring output location and worker count."""
        text = json.dumps(self.hashed_content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def schema() -> dict:
    return ExperimentConfig.model_json_schema()


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.model_validate_json(fh.read())


BM = {"drift": {"kind": "zero"}, "sigma": {"kind": "constant", "params": {"value": 1.0}}, "sigma_bar": {"kind": "zero"}}
SIGMA_BAR_ONLY = {"drift": {"kind": "zero"}, "sigma": {"kind": "zero"},
                  "sigma_bar": {"kind": "constant", "params": {"value": 1.0}}}
GAUSS = [{"kind": "gaussian", "params": {"center": 0.0, "width": 1.0}}]


def _cfg(kind, sim, coefficients=BM, params=None, test_functions=GAUSS, name=""):
    return {"kind": kind, "name": name, "sim": sim, "coefficients": coefficients,
            "test_functions": test_functions, "params": params or {}}


_PRESETS: dict[str, dict] = {
    "bm-null": _cfg("verify", {"n": 100, "replications": 2000, "T": 1.0, "steps": 256},
                    params={"z": 3.0, "threshold": 0.95, "seeds": 1}, test_functions=[]),
    "simulate-zero": _cfg("simulate", {"n": 4, "replications": 2, "steps": 8, "x0": [0.5]},
                          {"drift": {"kind": "zero"}, "sigma": {"kind": "zero"}, "sigma_bar": {"kind": "zero"}}),
    "moments-bm": _cfg("simulate", {"n": 50, "replications": 1000, "steps": 256},
                       params={"ns": [50, 200], "moment_q": 2.0, "concentration": {"K": 3.0, "eps": 0.1, "q": 4.0},
                               "export": False}),
    "sigma-bar-only": _cfg("qv", {"n": 20, "replications": 500, "steps": 512}, SIGMA_BAR_ONLY,
                           params={"tolerance": 0.1}),
    "sigma-only": _cfg("qv", {"n": 100, "replications": 2000, "steps": 256}, params={"tolerance": 0.1}),
    "nscale-bm": _cfg("nscale", {"n": 50, "replications": 500, "steps": 256},
                      params={"ns": [50, 100, 200, 400], "slope_band": [-1.15, -0.85]}),
    "nscale-sigma-bar": _cfg("nscale", {"n": 50, "replications": 500, "steps": 256}, SIGMA_BAR_ONLY,
                             params={"ns": [50, 100, 200, 400], "slope_band": [-0.1, 0.1]}),
    "chaos-bm": _cfg("chaos", {"n": 25, "replications": 200, "steps": 64},
                     params={"ns": [25, 50, 100, 200], "seeds": 20, "times": [0.5, 1.0]}),
    "indicator-drift": _cfg("verify", {"n": 100, "replications": 500, "steps": 128},
                            {"drift": {"kind": "indicator", "params": {"R": 1.0}},
                             "sigma": {"kind": "constant", "params": {"value": 1.0}},
                             "sigma_bar": {"kind": "constant", "params": {"value": 0.5}}},
                            params={"seeds": 1}, test_functions=[]),
    "hk-raw": _cfg("verify", {"n": 100, "replications": 500, "steps": 128},
                   {"drift": {"kind": "hk", "params": {"R": 1.0}},
                    "sigma": {"kind": "constant", "params": {"value": 1.0}},
                    "sigma_bar": {"kind": "constant", "params": {"value": 0.5}}},
                   params={"seeds": 1}, test_functions=[]),
    "hk-mollified": _cfg("verify", {"n": 100, "replications": 500, "steps": 128},
                         {"drift": {"kind": "hk", "params": {"R": 1.0, "delta": 0.1}},
                          "sigma": {"kind": "constant", "params": {"value": 1.0}},
                          "sigma_bar": {"kind": "constant", "params": {"value": 0.5}}},
                         params={"seeds": 1}, test_functions=[]),
    "indicator-sandwich": _cfg("assumptions", {"n": 1, "replications": 1, "steps": 1},
                               {"drift": {"kind": "indicator", "params": {"R": 1.0}},
                                "sigma": {"kind": "constant", "params": {"value": 1.0}},
                                "sigma_bar": {"kind": "zero"}},
                               params={"checks": ["sandwich"], "ks": [100, 1000, 10000], "seeds": 20,
                                       "K": [-2.0, 2.0], "max_final_gap": 0.05}),
    "assumptions-tanh": _cfg("assumptions", {"n": 1, "replications": 1, "steps": 1},
                             {"drift": {"kind": "zero"},
                              "sigma": {"kind": "statistic_tanh", "params": {"s0": 1.0, "a": 0.5}},
                              "sigma_bar": {"kind": "zero"}},
                             params={"checks": ["ellipticity", "holder"], "samples": 200, "holder_C": 1.0}),
    "coupling-constant": _cfg("density", {"n": 50, "replications": 400, "steps": 256, "store_noise": True},
                              {"drift": {"kind": "constant", "params": {"value": 1.0}},
                               "sigma": {"kind": "constant", "params": {"value": 1.0}},
                               "sigma_bar": {"kind": "zero"}},
                              params={"coupling": {"t": 1.0, "eps": [0.25, 0.125, 0.0625, 0.03125, 0.015625,
                                                                     0.0078125], "q": 2.0, "min_exponent": 0.9}}),
    "coupling-holder": _cfg("density", {"n": 50, "replications": 400, "steps": 256, "store_noise": True},
                            {"drift": {"kind": "zero"},
                             "sigma": {"kind": "holder", "params": {"s0": 0.5, "c": 1.0, "beta": 0.5}},
                             "sigma_bar": {"kind": "zero"}},
                            params={"coupling": {"t": 1.0, "eps": [0.25, 0.125, 0.0625, 0.03125, 0.015625,
                                                                   0.0078125], "q": 2.0, "min_exponent": 0.55}}),
    "density-bm": _cfg("density", {"n": 100, "replications": 1000, "steps": 256},
                       params={"t": 1.0, "eps": 1.0, "r": 1.5, "s": 0.5}),
    "bessel-scaling": _cfg("density", {"n": 1, "replications": 1, "steps": 1},
                           params={"gaussian_scaling": {"eps": [0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125],
                                                        "r": 1.5, "s": 0.5, "tolerance": 0.1}}),
    "blowup-bm": _cfg("blowup", {"n": 50, "replications": 1000, "steps": 256},
                      params={"ns": [50, 200], "t": [0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0], "r": 2.0,
                              "eps_max": 0.0625, "gamma_band": [0.2, 0.3]}),
    "blowup-drift": _cfg("blowup", {"n": 50, "replications": 1000, "steps": 256},
                         {"drift": {"kind": "indicator", "params": {"R": 1.0}},
                          "sigma": {"kind": "constant", "params": {"value": 1.0}},
                          "sigma_bar": {"kind": "zero"}},
                         params={"ns": [50, 200], "t": [0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0], "r": 2.0,
                                 "eps_max": 0.0625, "gamma_band": [0.1, 0.4]}),
    "mollify-step": _cfg("mollify", {"n": 1, "replications": 1, "steps": 1},
                         params={"drift": "step", "deltas": [0.4, 0.2, 0.1, 0.05], "nodes": 4001}),
    "mollify-hk": _cfg("mollify", {"n": 1, "replications": 1, "steps": 1},
                       {"drift": {"kind": "hk", "params": {"R": 1.0}},
                        "sigma": {"kind": "constant", "params": {"value": 1.0}},
                        "sigma_bar": {"kind": "zero"}},
                       params={"drift": "configured", "deltas": [0.4, 0.2, 0.1, 0.05], "nodes": 401, "grid_points": 401}),
}


def presets() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(presets())}")
    data = json.loads(json.dumps(_PRESETS[name]))
    data["name"] = name
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "master_seed":
            data["sim"]["master_seed"] = value
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)
