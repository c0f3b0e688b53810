"""Human-friendly parsing and formatting for rates and durations."""

_RATE_SUFFIXES = {
    "tbps": 1e12,
    "gbps": 1e9,
    "mbps": 1e6,
    "kbps": 1e3,
    "bps": 1.0,
}

_TIME_SUFFIXES = {
    "ms": 1.0,
    "s": 1000.0,
    "m": 60_000.0,
}


def parse_rate(text) -> float:
    """Parse a bit rate like '200mbps', '1.5gbps', or a plain bits/second number."""
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        lowered = str(text).strip().lower().replace(" ", "")
        for suffix, scale in _RATE_SUFFIXES.items():
            if lowered.endswith(suffix):
                value = float(lowered[: -len(suffix)]) * scale
                break
        else:
            value = float(lowered)
    if value <= 0:
        raise ValueError(f"rate must be positive, got {text!r}")
    return value


def parse_time_ms(text) -> float:
    """Parse a duration like '20ms', '1.5s', '2m', or a plain millisecond number."""
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        lowered = str(text).strip().lower().replace(" ", "")
        for suffix, scale in _TIME_SUFFIXES.items():
            if lowered.endswith(suffix):
                value = float(lowered[: -len(suffix)]) * scale
                break
        else:
            value = float(lowered)
    if value <= 0:
        raise ValueError(f"duration must be positive, got {text!r}")
    return value


def format_rate(bps: float) -> str:
    for suffix, scale in _RATE_SUFFIXES.items():
        if abs(bps) >= scale:
            return f"{bps / scale:.2f} {suffix[:-3].upper()}bps" if suffix != "bps" else f"{bps:.0f} bps"
    return f"{bps:.0f} bps"
