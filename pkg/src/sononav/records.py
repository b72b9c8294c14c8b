"""Line-delimited key=value records: training logs and trajectory files.

One record per line, `type=<kind>` first, fields space-separated. Floats are
written with repr so parsing restores them bit-exactly; vectors join their
components with commas. The format is append-friendly and byte-deterministic
for a fixed computation, which the reproducibility checks rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Iterator

import numpy as np


def _format_value(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(repr(float(v)) for v in value)
    text = str(value)
    if " " in text or "=" in text:
        raise ValueError(f"record values may not contain spaces or '=': {text!r}")
    return text


def format_record(kind: str, fields_map: dict) -> str:
    parts = [f"type={kind}"]
    parts += [f"{key}={_format_value(value)}" for key, value in fields_map.items()]
    return " ".join(parts)


def parse_record(line: str) -> tuple[str, dict[str, str]]:
    items = {}
    for token in line.split():
        if "=" not in token:
            raise ValueError(f"malformed record token {token!r}")
        key, value = token.split("=", 1)
        items[key] = value
    kind = items.pop("type", None)
    if kind is None:
        raise ValueError(f"record without a type: {line!r}")
    return kind, items


def read_records(path) -> Iterator[tuple[str, dict[str, str]]]:
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield parse_record(line)


class RecordWriter:
    """Append-only record sink."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="ascii")

    def write(self, kind: str, **fields_map) -> None:
        self._fh.write(format_record(kind, fields_map) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class TrajectoryRecord:
    """One environment step as written to trajectory files."""

    t: int
    position_mm: tuple[float, float, float]
    quaternion_xyzw: tuple[float, float, float, float]
    action: int
    reward: float
    d_mm: float
    theta_deg: float
    c_roi: float
    delta_d: float
    delta_theta: float
    delta_c: float
    beta_deg: float
    d_step_mm: float
    theta_step_deg: float
    done: bool
    reason: str | None

    def to_line(self) -> str:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return format_record("traj", values)

    @classmethod
    def from_line(cls, line: str) -> "TrajectoryRecord":
        kind, raw = parse_record(line)
        if kind != "traj":
            raise ValueError(f"not a trajectory record: {line!r}")

        def vec(s):
            return tuple(float(v) for v in s.split(","))

        return cls(
            t=int(raw["t"]),
            position_mm=vec(raw["position_mm"]),
            quaternion_xyzw=vec(raw["quaternion_xyzw"]),
            action=int(raw["action"]),
            reward=float(raw["reward"]),
            d_mm=float(raw["d_mm"]),
            theta_deg=float(raw["theta_deg"]),
            c_roi=float(raw["c_roi"]),
            delta_d=float(raw["delta_d"]),
            delta_theta=float(raw["delta_theta"]),
            delta_c=float(raw["delta_c"]),
            beta_deg=float(raw["beta_deg"]),
            d_step_mm=float(raw["d_step_mm"]),
            theta_step_deg=float(raw["theta_step_deg"]),
            done=raw["done"] == "1",
            reason=None if raw["reason"] == "-" else raw["reason"],
        )

    def close_to(self, other: "TrajectoryRecord", tol: float = 0.0) -> bool:
        """Field-for-field equality; NaNs compare equal."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name in ("position_mm", "quaternion_xyzw"):
                if any(abs(x - y) > tol for x, y in zip(a, b)):
                    return False
            elif isinstance(a, float):
                both_nan = isinstance(b, float) and math.isnan(a) and math.isnan(b)
                if not both_nan and not (a == b or abs(a - b) <= tol):
                    return False
            elif a != b:
                return False
        return True


def trajectory_record(t, pose, action, outcome) -> TrajectoryRecord:
    """Build a record from an environment step (pose = realized pose)."""
    info = outcome.info
    return TrajectoryRecord(
        t=t,
        position_mm=tuple(float(v) for v in pose.position),
        quaternion_xyzw=tuple(float(v) for v in pose.orientation),
        action=int(action),
        reward=float(outcome.reward),
        d_mm=info.d_mm,
        theta_deg=info.theta_deg,
        c_roi=info.c_roi,
        delta_d=info.delta_d,
        delta_theta=info.delta_theta,
        delta_c=info.delta_c,
        beta_deg=info.beta_deg,
        d_step_mm=info.d_step_mm,
        theta_step_deg=info.theta_step_deg,
        done=outcome.done,
        reason=info.reason,
    )


def outcome_action(outcome, action) -> int:
    return int(action)


def write_trajectory(path, records: Iterable[TrajectoryRecord]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")


def read_trajectory(path) -> list[TrajectoryRecord]:
    with open(path, "r", encoding="ascii") as fh:
        return [TrajectoryRecord.from_line(line) for line in fh if line.strip()]
