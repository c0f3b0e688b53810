"""Deterministic fluid model of TCP slow start and AIMD over one bottleneck link.

The model advances whole RTT rounds instead of individual packets: each round a
flow transmits its congestion window, the link delivers at most one
bandwidth-delay product worth of segments, and the window reacts to a
deterministic loss schedule. Identical inputs always produce identical traces,
which is what makes the throughput estimators testable at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

MSS_DEFAULT = 1500  # bytes per segment

SLOW_START = "slow_start"
CONGESTION_AVOIDANCE = "congestion_avoidance"
TIMEOUT_RECOVERY = "timeout_recovery"
PHASES = (SLOW_START, CONGESTION_AVOIDANCE, TIMEOUT_RECOVERY)

INITIAL_CWND = 10.0  # segments, common modern default
INITIAL_SSTHRESH = 64.0

# Consecutive loss rounds that count as a timeout and force slow-start re-entry.
TIMEOUT_LOSS_ROUNDS = 3

SIMULATED = "simulated"
MEASURED = "measured"


@dataclass(frozen=True)
class LinkModel:
    """One bottleneck path: capacity in bits/s, base RTT in ms, per-segment loss."""

    capacity: float
    rtt: float
    loss_rate: float = 0.0
    mss: int = MSS_DEFAULT

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError(f"capacity must be > 0, got {self.capacity}")
        if self.rtt <= 0:
            raise ValueError(f"rtt must be > 0, got {self.rtt}")
        if not 0 <= self.loss_rate < 1:
            raise ValueError(f"loss_rate must be in [0, 1), got {self.loss_rate}")
        if self.mss <= 0:
            raise ValueError(f"mss must be > 0, got {self.mss}")

    @property
    def bdp_segments(self) -> float:
        """Segments in flight needed to fill the pipe: capacity * rtt / segment bits."""
        return self.capacity * (self.rtt / 1000.0) / (self.mss * 8)

    @property
    def loss_period(self) -> int | None:
        """Every k-th transmitted segment is dropped; None on a lossless link."""
        if self.loss_rate == 0:
            return None
        return math.floor(1.0 / self.loss_rate)


@dataclass(frozen=True)
class FlowState:
    """Congestion state of one flow, advanced one RTT round at a time.

    ``sent`` counts transmitted segments (it drives the deterministic loss
    schedule) and ``loss_rounds`` counts consecutive lossy rounds so that a
    sustained loss episode degrades into a timeout.
    """

    cwnd: float = INITIAL_CWND
    ssthresh: float = INITIAL_SSTHRESH
    phase: str = SLOW_START
    delivered: float = 0.0
    sent: float = 0.0
    loss_rounds: int = 0
    initial_cwnd: float = INITIAL_CWND

    def __post_init__(self):
        if self.cwnd < 1:
            raise ValueError(f"cwnd must be >= 1, got {self.cwnd}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == SLOW_START and self.cwnd >= self.ssthresh:
            raise ValueError("slow_start requires cwnd < ssthresh")
        if self.delivered < 0 or self.sent < 0:
            raise ValueError("delivered and sent must be non-negative")


@dataclass(frozen=True)
class ThroughputTrace:
    """Timestamped cumulative byte counts from one test, real or simulated."""

    sample_interval: float  # ms
    samples: tuple[tuple[float, float], ...]  # (t ms since start, cumulative bytes)
    source: str = SIMULATED

    def __post_init__(self):
        if self.source not in (SIMULATED, MEASURED):
            raise ValueError(f"unknown trace source {self.source!r}")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be > 0")
        object.__setattr__(self, "samples", tuple((float(t), b) for t, b in self.samples))
        for (t0, b0), (t1, b1) in zip(self.samples, self.samples[1:]):
            if t1 <= t0:
                raise ValueError(f"sample times must be strictly increasing ({t0} -> {t1})")
            if b1 < b0:
                raise ValueError(f"cumulative bytes must be non-decreasing ({b0} -> {b1})")

    def check_rate_cap(self, cap_bps: float, slack: float = 1e-6):
        """Raise if any inter-sample rate exceeds the physical cap."""
        for (t0, b0), (t1, b1) in zip(self.samples, self.samples[1:]):
            rate = 8.0 * (b1 - b0) / ((t1 - t0) / 1000.0)
            if rate > cap_bps * (1 + slack):
                raise ValueError(f"trace rate {rate:.0f} bps exceeds cap {cap_bps:.0f} bps")

    @property
    def duration_ms(self) -> float:
        return self.samples[-1][0] - self.samples[0][0] if self.samples else 0.0

    @property
    def total_bytes(self) -> float:
        return self.samples[-1][1] - self.samples[0][1] if self.samples else 0.0


def _drops_between(sent_before: float, sent_after: float, period: int | None) -> float:
    # One segment is lost every time cumulative transmission crosses a multiple
    # of the loss period. Works for fractional sends too.
    if period is None:
        return 0.0
    return math.floor(sent_after / period) - math.floor(sent_before / period)


def advance_round(state: FlowState, link: LinkModel, capacity_share: float = 1.0) -> FlowState:
    """Advance one flow by a single RTT round.

    The flow transmits min(cwnd, bdp) segments scaled by ``capacity_share``
    (the fraction of the link this flow gets when several share it). Slow start
    doubles the window up to ssthresh, congestion avoidance adds one segment
    per round, a round containing a scheduled loss halves the window instead,
    and three lossy rounds in a row count as a timeout that re-enters slow
    start at the initial window.
    """
    if not 0 < capacity_share <= 1:
        raise ValueError(f"capacity_share must be in (0, 1], got {capacity_share}")

    bdp = link.bdp_segments
    cwnd = min(state.cwnd, bdp)  # the link cannot carry more than one bdp
    send = cwnd * capacity_share

    drops = _drops_between(state.sent, state.sent + send, link.loss_period)
    sent = state.sent + send
    delivered = state.delivered + max(0.0, send - drops)

    if drops > 0:
        loss_rounds = state.loss_rounds + 1
        if loss_rounds >= TIMEOUT_LOSS_ROUNDS:
            # Sustained loss: timeout, window collapses to the initial value.
            ssthresh = max(cwnd / 2.0, 2.0)
            new_cwnd = state.initial_cwnd
            phase = TIMEOUT_RECOVERY
            loss_rounds = 0
        else:
            new_cwnd = max(cwnd / 2.0, 1.0)
            ssthresh = new_cwnd
            phase = CONGESTION_AVOIDANCE
    else:
        loss_rounds = 0
        ssthresh = state.ssthresh
        if state.phase in (SLOW_START, TIMEOUT_RECOVERY):
            new_cwnd = min(cwnd * 2.0, ssthresh)
            phase = SLOW_START if new_cwnd < ssthresh else CONGESTION_AVOIDANCE
        else:
            new_cwnd = cwnd + 1.0
            phase = CONGESTION_AVOIDANCE
        new_cwnd = min(new_cwnd, bdp)
        if phase == SLOW_START and new_cwnd >= ssthresh:
            phase = CONGESTION_AVOIDANCE

    return replace(
        state,
        cwnd=max(new_cwnd, 1.0),
        ssthresh=ssthresh,
        phase=phase,
        delivered=delivered,
        sent=sent,
        loss_rounds=loss_rounds,
    )


@dataclass
class RoundLedger:
    """Cumulative delivered bytes at each round boundary, for resampling."""

    rtt: float
    boundaries: list[float] = field(default_factory=lambda: [0.0])

    def add_round(self, delivered_bytes: float):
        self.boundaries.append(self.boundaries[-1] + delivered_bytes)

    def bytes_at(self, t_ms: float) -> float:
        # Delivery is fluid within a round, so interpolate linearly between
        # round boundaries. This keeps inter-sample rates at or below capacity.
        pos = t_ms / self.rtt
        lo = math.floor(pos)
        if lo >= len(self.boundaries) - 1:
            return self.boundaries[-1]
        frac = pos - lo
        return self.boundaries[lo] + frac * (self.boundaries[lo + 1] - self.boundaries[lo])


def simulate_transfer(
    link: LinkModel,
    n_connections: int,
    duration: float,
    sample_interval: float = 100.0,
    initial_cwnd: float = INITIAL_CWND,
    initial_ssthresh: float = INITIAL_SSTHRESH,
) -> ThroughputTrace:
    """Simulate ``n_connections`` flows sharing one link for ``duration`` seconds.

    Flows are independent FlowStates; each round the link's capacity is split
    proportionally to the windows (share = min(1, bdp / sum of cwnd)). Returns
    the aggregate trace sampled every ``sample_interval`` ms. Pure function:
    identical inputs yield identical traces.
    """
    if n_connections < 1:
        raise ValueError(f"n_connections must be >= 1, got {n_connections}")
    if duration < 1:
        raise ValueError(f"duration must be >= 1 s, got {duration}")
    duration_ms = duration * 1000.0
    if sample_interval > duration_ms:
        raise ValueError(
            f"sample_interval {sample_interval} ms exceeds duration {duration_ms} ms"
        )

    flows = [
        FlowState(cwnd=initial_cwnd, ssthresh=initial_ssthresh, initial_cwnd=initial_cwnd)
        for _ in range(n_connections)
    ]
    bdp = link.bdp_segments
    ledger = RoundLedger(rtt=link.rtt)

    n_rounds = math.ceil(duration_ms / link.rtt)
    for _ in range(n_rounds):
        total_cwnd = sum(min(f.cwnd, bdp) for f in flows)
        share = min(1.0, bdp / total_cwnd) if total_cwnd > 0 else 1.0
        before = sum(f.delivered for f in flows)
        flows = [advance_round(f, link, capacity_share=share) for f in flows]
        after = sum(f.delivered for f in flows)
        ledger.add_round((after - before) * link.mss)

    n_samples = math.floor(duration_ms / sample_interval)
    samples = [
        (k * sample_interval, ledger.bytes_at(k * sample_interval))
        for k in range(n_samples + 1)
    ]
    trace = ThroughputTrace(sample_interval=sample_interval, samples=tuple(samples))
    trace.check_rate_cap(link.capacity * n_connections)
    return trace


def slow_start_rounds(link: LinkModel, initial_cwnd: float = INITIAL_CWND) -> int:
    """Doubling rounds until the window first reaches the link's bdp, lossless."""
    if initial_cwnd < 1:
        raise ValueError(f"initial_cwnd must be >= 1, got {initial_cwnd}")
    rounds = 0
    cwnd = initial_cwnd
    while cwnd < link.bdp_segments:
        cwnd *= 2
        rounds += 1
    return rounds


def loss_limited_throughput(
    link: LinkModel,
    warmup_rounds: int = 200,
    measure_rounds: int = 2000,
) -> float:
    """Steady-state rate of one flow under the link's periodic loss, in bits/s.

    Runs the round model past its transient, then averages delivered segments
    per RTT over many loss cycles. Only meaningful when loss limits the flow,
    so a lossless link is rejected.
    """
    if link.loss_rate == 0:
        raise ValueError("loss_rate must be > 0; a lossless link is capacity-limited")
    state = FlowState()
    for _ in range(warmup_rounds):
        state = advance_round(state, link)
    start_delivered = state.delivered
    for _ in range(measure_rounds):
        state = advance_round(state, link)
    segments_per_round = (state.delivered - start_delivered) / measure_rounds
    return segments_per_round * link.mss * 8 / (link.rtt / 1000.0)
