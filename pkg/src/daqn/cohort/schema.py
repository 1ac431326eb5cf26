"""Cohort schemas: feature lists, drug channels and the reward tag."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import ContractError

REWARD_TAGS = ("sepsis", "hypotension", "external")
STATIC_FEATURES = ["gender", "mechvent", "readmission", "age", "weight"]


@dataclass
class Feature:
    name: str
    unit: str = "-"


@dataclass
class ActionChannel:
    """One drug channel: bin 0 is "no drug", bins ``1..nonzero_bins`` are dose quantiles."""

    name: str
    unit: str
    nonzero_bins: int
    edges: list[float] | None = None

    @property
    def width(self) -> int:
        return self.nonzero_bins + 1


@dataclass
class CohortSchema:
    name: str
    reward: str
    dynamic: list[Feature]
    static: list[str] = field(default_factory=lambda: list(STATIC_FEATURES))
    channels: tuple[ActionChannel, ActionChannel] = ()
    clinical: list[str] = field(default_factory=list)
    timestep_hours: float = 4.0
    version: int = 1

    def __post_init__(self):
        if self.reward not in REWARD_TAGS:
            raise ContractError(f"unknown reward tag {self.reward!r}")
        if len(self.channels) != 2:
            raise ContractError("a schema needs exactly two drug channels")
        self.channels = tuple(self.channels)
        required = {"sepsis": ["sofa", "lactate"],
                    "hypotension": ["map", "urine", "urine_measured"]}.get(self.reward, [])
        missing = [c for c in required if c not in self.clinical]
        if missing:
            raise ContractError(f"{self.reward} schema lacks clinical columns {missing}")

    @property
    def grid_width(self) -> int:
        return self.channels[1].width

    @property
    def num_actions(self) -> int:
        return self.channels[0].width * self.channels[1].width

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.dynamic]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchema":
        d = dict(d)
        d["dynamic"] = [Feature(**f) for f in d["dynamic"]]
        d["channels"] = tuple(ActionChannel(**c) for c in d["channels"])
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CohortSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


_SEPSIS_DYNAMIC = [
    ("albumin", "g/dL"), ("arterial_be", "meq/L"), ("hco3", "meq/L"), ("creatinine", "mg/dL"),
    ("diastolic_bp", "mmHg"), ("fio2", "fraction"), ("glucose", "mg/dL"), ("hr", "bpm"),
    ("lactate", "mmol/L"), ("mean_bp", "mmHg"), ("systolic_bp", "mmHg"), ("rr", "bpm"),
    ("potassium", "meq/L"), ("sodium", "meq/L"), ("chloride", "meq/L"), ("calcium", "mg/dL"),
    ("ionised_ca", "mg/dL"), ("co2", "meq/L"), ("hb", "g/dL"), ("ph", "-"), ("bun", "mg/dL"),
    ("magnesium", "mg/dL"), ("sgot", "u/L"), ("sgpt", "u/L"), ("total_bili", "mg/dL"),
    ("wbc", "E9/L"), ("pao2", "mmHg"), ("paco2", "mmHg"), ("platelets", "E9/L"),
    ("input_total", "mL"), ("output_total", "mL"), ("output_4h", "mL"), ("gcs", "-"),
    ("spo2", "-"), ("temp", "Celsius"), ("ptt", "s"), ("pt", "s"), ("inr", "-"),
]

_HYPOTENSION_DYNAMIC = [
    ("alt", "IU/L"), ("ast", "IU/L"), ("diastolic_bp", "mmHg"), ("map", "mmHg"),
    ("systolic_bp", "mmHg"), ("urine", "mL"), ("pao2", "mmHg"), ("lactate", "mmol/L"),
    ("creatinine", "mg/dL"), ("fio2", "fraction"), ("gcs", "-"), ("urine_m", "-"),
    ("alt_ast_m", "-"), ("fio2_m", "-"), ("gcs_m", "-"), ("pao2_m", "-"), ("lactate_m", "-"),
    ("creatinine_m", "-"),
]


def sepsis_schema(edges: tuple[list[float], list[float]] | None = None) -> CohortSchema:
    iv_edges, vaso_edges = edges if edges else (None, None)
    return CohortSchema(
        name="sepsis", reward="sepsis",
        dynamic=[Feature(n, u) for n, u in _SEPSIS_DYNAMIC],
        channels=(ActionChannel("iv_fluid", "mL/4h", 4, iv_edges),
                  ActionChannel("vasopressor", "mcg/kg/min", 4, vaso_edges)),
        clinical=["sofa", "lactate"], timestep_hours=4.0)


def hypotension_schema(edges: tuple[list[float], list[float]] | None = None) -> CohortSchema:
    iv_edges, vaso_edges = edges if edges else (None, None)
    return CohortSchema(
        name="hypotension", reward="hypotension",
        dynamic=[Feature(n, u) for n, u in _HYPOTENSION_DYNAMIC],
        channels=(ActionChannel("fluid_bolus", "mL", 3, iv_edges),
                  ActionChannel("vasopressor", "mcg/kg/min", 3, vaso_edges)),
        clinical=["map", "urine", "urine_measured"], timestep_hours=1.0)


def synthetic_schema(obs_dim: int = 12, feature_names: list[str] | None = None) -> CohortSchema:
    names = feature_names or (["severity", "cue"] + [f"aux_{i}" for i in range(obs_dim - 2)])
    return CohortSchema(
        name="synthetic", reward="external",
        dynamic=[Feature(n) for n in names[:obs_dim]],
        channels=(ActionChannel("iv_fluid", "-", 4), ActionChannel("vasopressor", "-", 4)),
        clinical=[], timestep_hours=4.0)


BUILTIN = {"sepsis": sepsis_schema, "hypotension": hypotension_schema, "synthetic": synthetic_schema}


def get_schema(name_or_path) -> CohortSchema:
    if isinstance(name_or_path, CohortSchema):
        return name_or_path
    if name_or_path in BUILTIN:
        return BUILTIN[name_or_path]()
    path = Path(name_or_path)
    if path.exists():
        return CohortSchema.load(path)
    raise ContractError(f"unknown schema {name_or_path!r}: not a builtin ({sorted(BUILTIN)}) or a file")


def fit_dose_edges(doses: np.ndarray, nonzero_bins: int) -> list[float]:
    """Quantile edges over the nonzero doses (training split only)."""
    doses = np.asarray(doses, dtype=float)
    nz = doses[doses > 0]
    if nz.size == 0:
        raise ContractError("no nonzero doses to fit edges on")
    qs = np.arange(1, nonzero_bins) / nonzero_bins
    return [float(x) for x in np.quantile(nz, qs)]


def dose_bin(dose: float, edges: list[float]) -> int:
    if dose < 0:
        raise ContractError(f"negative dose {dose}")
    if dose == 0:
        return 0
    # count of edges strictly below the dose; top bin absorbs everything above the last edge
    return 1 + int(np.searchsorted(np.asarray(edges), dose, side="left"))


def discretize_action(iv_dose: float, vaso_dose: float, schema: CohortSchema,
                      edges: tuple[list[float], list[float]] | None = None) -> int:
    iv_edges, vaso_edges = edges if edges else (schema.channels[0].edges, schema.channels[1].edges)
    if iv_edges is None or vaso_edges is None:
        raise ContractError("schema has no fitted dose edges")
    iv_bin = dose_bin(iv_dose, iv_edges)
    vaso_bin = dose_bin(vaso_dose, vaso_edges)
    return iv_bin * schema.grid_width + vaso_bin


def split_action(action: int, schema: CohortSchema) -> tuple[int, int]:
    return divmod(int(action), schema.grid_width)
