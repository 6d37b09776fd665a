"""Scenario files: flat text, `key = value` lines under [section] headers.

Blank lines and `#` comments are ignored. Unknown sections or keys are
validation errors so typos cannot silently change a run. See
docs/scenario_format.md for the full key reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .horizon import HorizonMode
from .store import ATTRIBUTE_SCHEMA


class ScenarioError(ValueError):
    """Scenario file is malformed or fails validation."""


@dataclass(frozen=True)
class MapError:
    segment: int
    attribute: str
    wrong_value: int | bool


@dataclass
class Scenario:
    # [run]
    seed: int = 0
    duration: int = 10
    # [network]
    network_kind: str = "synthetic"
    network_seed: int | None = None  # defaults to run seed
    network_segments: int = 20
    chain_segment_length: float = 100.0
    chain_speed_limit: int = 50
    # [map]
    regions: int = 1
    errors: list[MapError] = field(default_factory=list)
    # [fleet]
    vehicles: int = 1
    speed: float = 15.0
    starts: list[tuple[int, float]] = field(default_factory=list)
    clouds: int = 1
    noise_flip_probability: float = 0.0
    confirm_interval: int = 5
    # [channel]
    drop_probability: float = 0.0
    corrupt_probability: float = 0.0
    bidirectional: bool = False
    frames_per_tick: int = 256
    max_retransmit_rounds: int = 10
    # [healing]
    threshold_k: int = 3
    cycle_interval: int = 5
    poll_interval: int = 5
    # [horizon]
    horizon_length: float = 500.0
    horizon_mode: HorizonMode = HorizonMode.MULTI_PATH
    max_branch_depth: int = 1
    profile_tolerance: float = 1e-3

    def validate(self) -> None:
        if self.duration <= 0:
            raise ScenarioError("duration must be > 0")
        if self.vehicles < 1:
            raise ScenarioError("fleet must have at least one vehicle")
        if self.speed <= 0:
            raise ScenarioError("vehicle speed must be > 0")
        if self.network_kind not in ("synthetic", "chain"):
            raise ScenarioError(f"unknown network kind {self.network_kind!r}")
        if self.network_segments < 2:
            raise ScenarioError("network needs at least 2 segments")
        if self.regions < 1:
            raise ScenarioError("regions must be >= 1")
        if self.clouds < 1:
            raise ScenarioError("need at least one vehicle cloud")
        if not 0.0 <= self.noise_flip_probability <= 1.0:
            raise ScenarioError("noise_flip_probability must be in [0, 1]")
        for name in ("drop_probability", "corrupt_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScenarioError(f"{name} must be in [0, 1]")
        if self.threshold_k < 1:
            raise ScenarioError("threshold_k must be >= 1")
        if self.cycle_interval < 1 or self.poll_interval < 1:
            raise ScenarioError("healing intervals must be >= 1")
        if self.confirm_interval < 1:
            raise ScenarioError("confirm_interval must be >= 1")
        if self.horizon_length <= 0:
            raise ScenarioError("horizon length must be > 0")
        if self.frames_per_tick < 1:
            raise ScenarioError("frames_per_tick must be >= 1")
        for err in self.errors:
            if err.attribute not in ATTRIBUTE_SCHEMA:
                raise ScenarioError(f"unknown attribute {err.attribute!r}")
        if self.starts and len(self.starts) != self.vehicles:
            raise ScenarioError(
                f"{len(self.starts)} start positions for {self.vehicles} vehicles"
            )


def _parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ScenarioError(f"line {lineno}: empty section name")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        if current is None:
            raise ScenarioError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in current:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value
    return sections


def _to_bool(value: str, where: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ScenarioError(f"{where}: bad boolean {value!r}")


def _to_int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ScenarioError(f"{where}: bad integer {value!r}") from None


def _to_float(value: str, where: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ScenarioError(f"{where}: bad number {value!r}") from None


def _parse_error(value: str, where: str) -> MapError:
    parts = value.split(":")
    if len(parts) != 3:
        raise ScenarioError(f"{where}: expected segment:attribute:value")
    segment = _to_int(parts[0], where)
    attribute = parts[1].strip()
    raw = parts[2].strip()
    wrong: int | bool
    if attribute.startswith("is_"):
        wrong = _to_bool(raw, where)
    else:
        wrong = _to_int(raw, where)
    return MapError(segment=segment, attribute=attribute, wrong_value=wrong)


def _parse_start(value: str, where: str) -> tuple[int, float]:
    parts = value.split(":")
    if len(parts) != 2:
        raise ScenarioError(f"{where}: expected segment:offset")
    return _to_int(parts[0], where), _to_float(parts[1], where)


_MODES = {"single_path": HorizonMode.SINGLE_PATH, "multi_path": HorizonMode.MULTI_PATH}


def parse_scenario(text: str) -> Scenario:
    sections = _parse_sections(text)
    sc = Scenario()

    known_sections = {"run", "network", "map", "fleet", "channel", "healing",
                      "horizon"}
    unknown = set(sections) - known_sections
    if unknown:
        raise ScenarioError(f"unknown sections {sorted(unknown)}")

    def take(section: str, key: str) -> str | None:
        return sections.get(section, {}).pop(key, None)

    if (v := take("run", "seed")) is not None:
        sc.seed = _to_int(v, "run.seed")
    if (v := take("run", "duration")) is not None:
        sc.duration = _to_int(v, "run.duration")

    if (v := take("network", "kind")) is not None:
        sc.network_kind = v
    if (v := take("network", "seed")) is not None:
        sc.network_seed = _to_int(v, "network.seed")
    if (v := take("network", "segments")) is not None:
        sc.network_segments = _to_int(v, "network.segments")
    if (v := take("network", "segment_length")) is not None:
        sc.chain_segment_length = _to_float(v, "network.segment_length")
    if (v := take("network", "speed_limit")) is not None:
        sc.chain_speed_limit = _to_int(v, "network.speed_limit")

    if (v := take("map", "regions")) is not None:
        sc.regions = _to_int(v, "map.regions")
    map_keys = sections.get("map", {})
    for key in sorted(k for k in list(map_keys) if k.startswith("error.")):
        sc.errors.append(_parse_error(map_keys.pop(key), f"map.{key}"))

    if (v := take("fleet", "vehicles")) is not None:
        sc.vehicles = _to_int(v, "fleet.vehicles")
    if (v := take("fleet", "speed")) is not None:
        sc.speed = _to_float(v, "fleet.speed")
    if (v := take("fleet", "clouds")) is not None:
        sc.clouds = _to_int(v, "fleet.clouds")
    if (v := take("fleet", "noise_flip_probability")) is not None:
        sc.noise_flip_probability = _to_float(v, "fleet.noise_flip_probability")
    if (v := take("fleet", "confirm_interval")) is not None:
        sc.confirm_interval = _to_int(v, "fleet.confirm_interval")
    fleet_keys = sections.get("fleet", {})
    for key in sorted(k for k in list(fleet_keys) if k.startswith("start.")):
        sc.starts.append(_parse_start(fleet_keys.pop(key), f"fleet.{key}"))

    if (v := take("channel", "drop_probability")) is not None:
        sc.drop_probability = _to_float(v, "channel.drop_probability")
    if (v := take("channel", "corrupt_probability")) is not None:
        sc.corrupt_probability = _to_float(v, "channel.corrupt_probability")
    if (v := take("channel", "bidirectional")) is not None:
        sc.bidirectional = _to_bool(v, "channel.bidirectional")
    if (v := take("channel", "frames_per_tick")) is not None:
        sc.frames_per_tick = _to_int(v, "channel.frames_per_tick")
    if (v := take("channel", "max_retransmit_rounds")) is not None:
        sc.max_retransmit_rounds = _to_int(v, "channel.max_retransmit_rounds")

    if (v := take("healing", "threshold_k")) is not None:
        sc.threshold_k = _to_int(v, "healing.threshold_k")
    if (v := take("healing", "cycle_interval")) is not None:
        sc.cycle_interval = _to_int(v, "healing.cycle_interval")
    if (v := take("healing", "poll_interval")) is not None:
        sc.poll_interval = _to_int(v, "healing.poll_interval")

    if (v := take("horizon", "length")) is not None:
        sc.horizon_length = _to_float(v, "horizon.length")
    if (v := take("horizon", "mode")) is not None:
        if v not in _MODES:
            raise ScenarioError(f"horizon.mode must be one of {sorted(_MODES)}")
        sc.horizon_mode = _MODES[v]
    if (v := take("horizon", "max_branch_depth")) is not None:
        sc.max_branch_depth = _to_int(v, "horizon.max_branch_depth")
    if (v := take("horizon", "profile_tolerance")) is not None:
        sc.profile_tolerance = _to_float(v, "horizon.profile_tolerance")

    for name, leftover in sections.items():
        if leftover:
            raise ScenarioError(
                f"unknown keys in [{name}]: {sorted(leftover)}"
            )

    sc.validate()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text)
