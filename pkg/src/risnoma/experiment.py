"""Declarative experiment presets and the sweep runner behind the CLI.

A preset is a flat YAML mapping (scalars and inline lists only).  Running a
preset produces one CSV row per (scenario, sweep point, user) with the
analytic and/or simulated BER.  Output is a pure function of the preset and
the overrides, so re-running with the same seed reproduces the file byte for
byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import yaml

from .ber_analytic import ber_all
from .channel_model import ConfigError, SystemConfig
from .constellation import extract_ber_terms
from .mc_engine import MIN_ERRORS, run_noma_point, run_oma_point
from .pa_optimizer import PaProblem, optimize

__all__ = [
    "PresetError",
    "ExperimentPreset",
    "load_preset",
    "parse_preset",
    "validate",
    "list_presets",
    "preset_path",
    "run_experiment",
    "write_csv",
    "CSV_FIELDS",
]

log = logging.getLogger(__name__)

CSV_FIELDS = [
    "preset", "scenario", "user", "power_dB", "ber_analytic", "ber_mc", "stderr_mc",
    "errors", "runs", "seed", "tx_power_dB", "note",
]
SCENARIOS = ("noma", "oma1", "oma2")
MODES = ("analytic", "mc", "both")

_REQUIRED = ("name", "L", "bits", "d_user_ris", "d_ris_bs", "sweep_start", "sweep_stop", "sweep_step")
_KNOWN = set(_REQUIRED) | {
    "description", "scenario", "L_total", "psi", "sigma_n2", "P", "sweep_users", "mode", "pa",
    "runs", "min_errors", "seed", "workers",
}


class PresetError(ConfigError):
    """Preset problem with the offending field and, when known, its line."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None, source: str | None = None):
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message, field=field)
        self.line = line
        self.source = source


@dataclass(frozen=True)
class ExperimentPreset:
    """A named, fully validated experiment."""

    name: str
    cfg: SystemConfig
    scenarios: tuple[str, ...] = ("noma",)
    sweep: tuple[float, ...] = ()
    sweep_users: tuple[int, ...] = ()
    mode: str = "both"
    pa: bool = False
    runs: int = 10**5
    min_errors: int = MIN_ERRORS
    seed: int = 0
    workers: int = 1
    description: str = ""

    def __post_init__(self):
        if not self.sweep:
            raise PresetError("power sweep is empty", field="sweep_start")
        if self.mode not in MODES:
            raise PresetError(f"mode must be one of {MODES}, got {self.mode!r}", field="mode")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise PresetError(f"scenario must be one of {SCENARIOS}, got {s!r}", field="scenario")
        if self.mode != "analytic" and self.runs < 1:
            raise PresetError("runs must be >= 1 when simulating", field="runs")
        if self.min_errors < 0:
            raise PresetError("min_errors must be >= 0", field="min_errors")
        if self.workers < 1:
            raise PresetError("workers must be >= 1", field="workers")
        for u in self.sweep_users:
            if not 0 <= u < self.cfg.K:
                raise PresetError(f"sweep user {u + 1} outside 1..{self.cfg.K}", field="sweep_users")

    def powers_at(self, point: float) -> np.ndarray:
        """Per-user transmit powers (dB) at sweep value ``point``."""
        p = np.array(self.cfg.P, dtype=float)
        users = self.sweep_users or tuple(range(self.cfg.K))
        p[list(users)] = point
        return p

    def digest(self) -> str:
        blob = json.dumps(_preset_record(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _preset_record(preset: ExperimentPreset) -> dict:
    d = asdict(preset)
    d["cfg"] = asdict(preset.cfg)
    d.pop("workers")  # execution detail; results do not depend on it
    return d


def _node_lines(text: str) -> dict[str, int]:
    """1-based line of every top-level key."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return {}
    if not isinstance(root, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in root.value}


def _as_list(value, name, kind, line, source):
    seq = value if isinstance(value, list) else [value]
    try:
        return [kind(v) for v in seq]
    except (TypeError, ValueError):
        raise PresetError(f"expected a list of {kind.__name__}s, got {value!r}", field=name, line=line, source=source)


def _sweep_grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    if step <= 0:
        raise ValueError("sweep_step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    if n < 1:
        return ()
    return tuple(round(start + i * step, 10) for i in range(n))


def parse_preset(text: str, source: str | None = None) -> ExperimentPreset:
    """Parse and fully validate preset text.

    Raises
    ------
    PresetError
        With the file, line and field of the first problem found.
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise PresetError(f"not valid YAML ({getattr(exc, 'problem', exc)})",
                          line=mark.line + 1 if mark else None, source=source) from None
    if not isinstance(data, dict):
        raise PresetError("preset must be a key: value mapping", source=source)
    lines = _node_lines(text)

    def err(msg, key):
        return PresetError(msg, field=key, line=lines.get(key), source=source)

    for key, val in data.items():
        if key not in _KNOWN:
            raise err("unknown field", key)
        if isinstance(val, dict):
            raise err("nested mappings are not allowed; use flat keys", key)
    for key in _REQUIRED:
        if key not in data:
            raise PresetError("required field missing", field=key, source=source)

    def lst(key, kind):
        return _as_list(data[key], key, kind, lines.get(key), source)

    def scalar(key, kind, default=None):
        if key not in data:
            return default
        try:
            return kind(data[key])
        except (TypeError, ValueError):
            raise err(f"expected {kind.__name__}, got {data[key]!r}", key) from None

    L = lst("L", int)
    if "L_total" in data and scalar("L_total", int) != sum(L):
        raise err(f"L_total={data['L_total']} but the partitions sum to {sum(L)}", "L_total")
    K = len(L)
    P = lst("P", float) if "P" in data else [0.0] * K
    try:
        cfg = SystemConfig(
            L=tuple(L), bits=tuple(lst("bits", int)), d_user_ris=tuple(lst("d_user_ris", float)),
            d_ris_bs=scalar("d_ris_bs", float), psi=scalar("psi", float, 2.2),
            sigma_n2=scalar("sigma_n2", float, 1.0), P=tuple(P),
        )
    except ConfigError as exc:
        f = exc.field
        raise PresetError(str(exc), field=f, line=lines.get(f), source=source) from None

    scen = data.get("scenario", "noma")
    scenarios = tuple(str(s).lower() for s in (scen if isinstance(scen, list) else [scen]))
    try:
        sweep = _sweep_grid(scalar("sweep_start", float), scalar("sweep_stop", float), scalar("sweep_step", float))
    except ValueError as exc:
        raise err(str(exc), "sweep_step") from None
    users = tuple(u - 1 for u in lst("sweep_users", int)) if "sweep_users" in data else ()
    pa = data.get("pa", False)
    if isinstance(pa, str):
        if pa.lower() not in ("on", "off"):
            raise err("pa must be on/off", "pa")
        pa = pa.lower() == "on"
    try:
        return ExperimentPreset(
            name=str(data["name"]), cfg=cfg, scenarios=scenarios, sweep=sweep, sweep_users=users,
            mode=str(data.get("mode", "both")).lower(), pa=bool(pa), runs=scalar("runs", int, 10**5),
            min_errors=scalar("min_errors", int, MIN_ERRORS), seed=scalar("seed", int, 0),
            workers=scalar("workers", int, 1), description=str(data.get("description", "")),
        )
    except PresetError as exc:
        raise PresetError(str(exc), field=exc.field, line=lines.get(exc.field), source=source) from None


def load_preset(path_or_name: str | Path) -> ExperimentPreset:
    """Load a preset file, or a bundled preset by name."""
    path = Path(path_or_name)
    if not path.exists():
        path = preset_path(str(path_or_name))
    return parse_preset(path.read_text(), source=str(path))


def validate(path_or_name: str | Path) -> ExperimentPreset:
    """Full invariant check of a preset without running anything."""
    preset = load_preset(path_or_name)
    extract_ber_terms(preset.cfg.bits)  # constellation must be buildable
    return preset


def _preset_dir() -> Path:
    return Path(str(resources.files("risnoma") / "presets"))


def list_presets() -> list[str]:
    return sorted(p.stem for p in _preset_dir().glob("*.yaml"))


def preset_path(name: str) -> Path:
    path = _preset_dir() / f"{name}.yaml"
    if not path.exists():
        raise PresetError(f"no such preset or file: {name!r} (bundled: {', '.join(list_presets())})")
    return path


def _point_seed(seed: int, scenario_idx: int, point_idx: int) -> int:
    return int(np.random.SeedSequence([seed, scenario_idx, point_idx]).generate_state(1)[0])


def _run_point(args) -> list[dict]:
    preset, scenario, s_idx, p_idx, point = args
    cfg = preset.cfg
    K = cfg.K
    seed = _point_seed(preset.seed, s_idx, p_idx)
    rows = [
        {"preset": preset.name, "scenario": scenario, "user": k + 1, "power_dB": point,
         "ber_analytic": "", "ber_mc": "", "stderr_mc": "", "errors": "", "runs": "", "seed": seed,
         "tx_power_dB": "", "note": ""}
        for k in range(K)
    ]
    try:
        p = preset.powers_at(point)
        if preset.pa and scenario == "noma":
            problem = PaProblem(cfg.with_powers(p), P_max_dB=p)
            p = optimize(problem).p_star
        for k in range(K):
            rows[k]["tx_power_dB"] = float(p[k])
        cfg_p = cfg.with_powers(p)
        if preset.mode in ("analytic", "both") and scenario == "noma":
            ber = ber_all(cfg_p)
            for k in range(K):
                rows[k]["ber_analytic"] = float(ber[k])
        if preset.mode in ("mc", "both"):
            kw = dict(runs=preset.runs, seed=seed, min_errors=preset.min_errors or None)
            res = run_noma_point(cfg_p, **kw) if scenario == "noma" else run_oma_point(cfg_p, scenario, **kw)
            for k in range(K):
                rows[k].update(ber_mc=float(res.ber[k]), stderr_mc=float(res.stderr[k]),
                               errors=int(res.errors[k]), runs=int(res.runs))
                if res.discarded_alignment_failures:
                    rows[k]["note"] = f"discarded {res.discarded_alignment_failures} unaligned draws"
    except Exception as exc:  # attach to this point; the sweep goes on
        log.warning("point %s/%s failed: %s", scenario, point, exc)
        for r in rows:
            r["note"] = f"error: {type(exc).__name__}: {exc}"
    return rows


@dataclass
class ExperimentResult:
    preset: ExperimentPreset
    rows: list[dict] = field(default_factory=list)

    @property
    def failed_points(self) -> int:
        return sum(1 for r in self.rows if str(r["note"]).startswith("error"))


def run_experiment(preset: ExperimentPreset, mode: str | None = None, runs: int | None = None,
                   seed: int | None = None, pa: bool | None = None, workers: int | None = None) -> ExperimentResult:
    """Evaluate every (scenario, sweep point) of ``preset``.

    Overrides replace the preset's own values.  Points are independent and
    may run on a process pool; rows come back in sweep order either way.
    """
    over = {k: v for k, v in dict(mode=mode, runs=runs, seed=seed, pa=pa, workers=workers).items() if v is not None}
    preset = replace(preset, **over) if over else preset
    tasks = [
        (preset, scen, s_idx, p_idx, point)
        for s_idx, scen in enumerate(preset.scenarios)
        for p_idx, point in enumerate(preset.sweep)
    ]
    if preset.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(preset.workers) as pool:
            chunks = list(pool.map(_run_point, tasks))
    else:
        chunks = [_run_point(t) for t in tasks]
    return ExperimentResult(preset=preset, rows=[r for c in chunks for r in c])


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metadata(preset: ExperimentPreset) -> dict[str, str]:
    from . import __version__

    cfg = preset.cfg
    return {
        "preset": preset.name,
        "preset_sha256": preset.digest(),
        "risnoma": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": str(preset.seed),
        "mode": preset.mode,
        "pa": "on" if preset.pa else "off",
        "runs": str(preset.runs),
        "min_errors": str(preset.min_errors),
        "L": json.dumps(list(cfg.L)),
        "bits": json.dumps(list(cfg.bits)),
        "d_user_ris": json.dumps(list(cfg.d_user_ris)),
        "d_ris_bs": repr(cfg.d_ris_bs),
        "psi": repr(cfg.psi),
        "sigma_n2": repr(cfg.sigma_n2),
        "P": json.dumps(list(cfg.P)),
        "sweep_users": json.dumps([u + 1 for u in preset.sweep_users] or "all"),
    }


def write_csv(result: ExperimentResult, out=None) -> str:
    """Render ``result`` as CSV with ``#`` metadata lines; optionally write it to ``out``."""
    buf = io.StringIO()
    for k, v in metadata(result.preset).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in result.rows:
        w.writerow({k: _fmt(row[k]) for k in CSV_FIELDS})
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


def read_csv(path_or_text: str | Path) -> list[dict]:
    """Rows of a result CSV, skipping metadata lines."""
    if isinstance(path_or_text, Path) or "\n" not in str(path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = str(path_or_text)
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
