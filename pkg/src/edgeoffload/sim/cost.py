"""Monthly cost of cloud inference options versus an on-prem workstation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

from ..errors import ConfigurationError

INSTANCE = "instance"
PER_MINUTE = "per_minute"
PER_IMAGE_FPS = "per_image_fps"
ONPREM = "onprem"
MODES = (INSTANCE, PER_MINUTE, PER_IMAGE_FPS, ONPREM)

DEFAULT_MONTH_HOURS = 744.0


@dataclass(frozen=True)
class PricingTable:
    hourly_instance_usd: Optional[float] = None
    per_minute_video_usd: Optional[float] = None
    per_1000_images_usd: Optional[float] = None
    workstation_capex_usd: Optional[float] = None
    workstation_power_kw: Optional[float] = None
    electricity_usd_per_kwh: Optional[float] = None
    month_hours: float = DEFAULT_MONTH_HOURS

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and (not isinstance(v, (int, float)) or v < 0):
                raise ConfigurationError(f"{f.name} must be a number >= 0")
        if not self.month_hours > 0:
            raise ConfigurationError("month_hours must be > 0")


@dataclass(frozen=True)
class OnPremCost:
    capex_usd: float
    monthly_electricity_usd: float


def _need(pricing: PricingTable, *names: str) -> tuple:
    missing = [n for n in names if getattr(pricing, n) is None]
    if missing:
        raise ConfigurationError(f"pricing is missing {', '.join(missing)}")
    return tuple(getattr(pricing, n) for n in names)


def monthly_cost(pricing: PricingTable, mode: str, fps: float = 1.0):
    """Dollars per month for one continuously processed video stream.

    ``onprem`` returns an ``OnPremCost`` (one-time capex plus monthly
    electricity); every other mode returns a float.
    """
    hours = pricing.month_hours
    if mode == INSTANCE:
        (rate,) = _need(pricing, "hourly_instance_usd")
        return rate * hours
    if mode == PER_MINUTE:
        (rate,) = _need(pricing, "per_minute_video_usd")
        return rate * hours * 60
    if mode == PER_IMAGE_FPS:
        (rate,) = _need(pricing, "per_1000_images_usd")
        if fps < 0:
            raise ConfigurationError("fps must be >= 0")
        return rate / 1000 * fps * hours * 3600
    if mode == ONPREM:
        capex, kw, usd_kwh = _need(pricing, "workstation_capex_usd", "workstation_power_kw",
                                   "electricity_usd_per_kwh")
        return OnPremCost(capex, kw * hours * usd_kwh)
    raise ConfigurationError(f"unknown cost mode {mode!r}")


@dataclass(frozen=True)
class CostRow:
    label: str
    mode: str
    monthly_usd: float
    rounded_usd: int
    capex_usd: Optional[float] = None
    reference_usd: Optional[float] = None


_ROW_KEYS = {"label", "mode", "fps", "reference_usd"}


def cost_table(rows: Sequence[dict], month_hours: Optional[float] = None) -> list:
    """Evaluate pricing rows (dicts with ``label``, ``mode``, the rate
    fields that mode needs and optionally ``fps``)."""
    out = []
    price_fields = {f.name for f in fields(PricingTable)}
    for i, row in enumerate(rows):
        unknown = set(row) - price_fields - _ROW_KEYS
        if unknown:
            raise ConfigurationError(f"rows[{i}]: unknown fields {sorted(unknown)}")
        mode = row.get("mode")
        if mode not in MODES:
            raise ConfigurationError(f"rows[{i}]: mode must be one of {MODES}")
        kwargs = {k: v for k, v in row.items() if k in price_fields}
        if month_hours is not None:
            kwargs["month_hours"] = month_hours
        pricing = PricingTable(**kwargs)
        value = monthly_cost(pricing, mode, fps=row.get("fps", 1.0))
        capex = None
        if isinstance(value, OnPremCost):
            capex, value = value.capex_usd, value.monthly_electricity_usd
        out.append(CostRow(
            label=row.get("label", f"row {i}"),
            mode=mode,
            monthly_usd=value,
            rounded_usd=int(round(value)),
            capex_usd=capex,
            reference_usd=row.get("reference_usd"),
        ))
    return out


def format_cost_table(rows: Sequence[CostRow]) -> str:
    header = ("compute", "mode", "monthly_usd", "rounded", "one_time_usd", "reference")
    body = []
    for r in rows:
        body.append((
            r.label,
            r.mode,
            f"{r.monthly_usd:.2f}",
            str(r.rounded_usd),
            "" if r.capex_usd is None else f"{r.capex_usd:.2f}",
            "" if r.reference_usd is None else f"{r.reference_usd:g}",
        ))
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)))
    return "\n".join(lines)
