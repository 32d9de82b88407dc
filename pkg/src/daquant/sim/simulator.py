"""Sequential node/agent training loop with a bit-exact uplink meter."""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from daquant.gradcorr import (
    CorrectionMsg,
    CorrectionParams,
    assemble_gradient,
    gradcorr_decode,
    gradcorr_encode,
)
from daquant.problems import Task, TaskSpec, build_task, estimate_Cz
from daquant.quant.bits import BitString, float64_bits
from daquant.quant.combinatorics import CorruptMessageError
from daquant.quant.dataq import (
    HEADER_BITS,
    EncodedSample,
    QuantConfig,
    ScaleMode,
    dataq_decode,
    dataq_encode,
    dataq_stochastic,
    levels_to_point,
)
from daquant.selection import SelectionKind, ThresholdPolicy, should_transmit
from daquant.sim.model import LRSchedule, ModelState
from daquant.sim.rng import Purpose, SharedCoordinates, stream
from daquant.sim.wire import MsgType, WireMessage, decode_frames, encode_frames

CSV_SCHEMA_VERSION = 1


class Scheme(str, enum.Enum):
    DAQU_FULL = "daqu_full"
    DATAQ_ONLY = "dataq_only"
    GRADQ_BASELINE = "gradq_baseline"
    UNQUANTIZED = "unquantized"


class Sampling(str, enum.Enum):
    EPOCH = "epoch"  # a fresh permutation of the dataset every N iterations
    IID = "iid"      # N uniform draws with replacement per epoch


def default_m(h: int, d: int, factor: float = 1.0) -> int:
    return max(2, math.ceil(factor * h * math.sqrt(d)))


def baseline_m(h: int) -> int:
    return math.isqrt(h - 1) + 2 if h > 1 else 2  # ceil(sqrt(h)) + 1


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    scheme: Scheme = Scheme.DAQU_FULL
    m: int | None = None
    m_factor: float = 1.0
    quant_mode: ScaleMode = ScaleMode.ABSOLUTE
    selection: SelectionKind = SelectionKind.DISABLED
    selection_alpha: float = 0.2
    selection_c: float = 0.25
    selection_horizon: int | None = None
    seed: int = 0
    sampling: Sampling = Sampling.EPOCH
    n: int = 1000
    batch_size: int = 1
    nodes: int = 1
    shared_randomness: bool = False
    D_radius: float | None = None
    lr: float = 0.1
    lr_decay: float = 1.0
    lr_boundaries: tuple[int, ...] = ()
    momentum: float = 0.0
    record_every: int = 100
    Cz_trials: int = 2000

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "quant_mode", ScaleMode(self.quant_mode))
        object.__setattr__(self, "selection", SelectionKind(self.selection))
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        checks = [
            ("n", self.n >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("nodes", self.nodes >= 1, "must be >= 1"),
            ("record_every", self.record_every >= 1, "must be >= 1"),
            ("m", self.m is None or self.m >= 2, "must be >= 2"),
            ("m_factor", self.m_factor > 0, "must be > 0"),
            ("lr", self.lr > 0, "must be > 0"),
            ("momentum", 0 <= self.momentum < 1, "must lie in [0, 1)"),
            ("D_radius", self.D_radius is None or self.D_radius > 0, "must be > 0"),
            ("quant_mode", self.quant_mode is not ScaleMode.BATCH_MAX or self.batch_size > 1,
             "batch_max needs batch_size > 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name}: {msg}")


@dataclass
class MetricsRecord:
    iteration: int
    cumulative_bits: int
    train_loss: float
    grad_norm: float
    transmitted_fraction: float
    cap_exceeded_count: int
    transmitted: int = 0
    skipped: int = 0
    threshold: float = 0.0


CSV_COLUMNS = [f.name for f in fields(MetricsRecord)]


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    w: np.ndarray
    iteration_bits: list[int]
    m: int | None
    C_z: float | None
    fallback_count: int = 0

    def to_csv(self) -> str:
        return records_to_csv(self.records)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def records_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in records:
        buf.write(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS) + "\n")
    return buf.getvalue()


@dataclass
class _Decoded:
    g: np.ndarray | None = None
    transmitted: bool = True


class Codec:
    """Scheme-specific encode (node side) and decode (agent side)."""

    def __init__(self, task: Task, cfg: ExperimentConfig, C_z: float | None = None):
        self.task = task
        self.scheme = cfg.scheme
        self.seed = cfg.seed
        self.mode = cfg.quant_mode
        h, d = task.h, task.zdim
        self.qcfg = None
        self.params = None
        self.shared = None
        if self.scheme in (Scheme.DAQU_FULL, Scheme.DATAQ_ONLY):
            m = cfg.m if cfg.m is not None else default_m(h, d, cfg.m_factor)
            self.qcfg = QuantConfig(m=m, B=task.B, d=d, mode=cfg.quant_mode)
        if self.scheme is Scheme.DAQU_FULL:
            if C_z is None:
                raise ValueError("gradient correction needs C_z")
            B_eff = self.qcfg.effective_B
            self.params = CorrectionParams(C_z=C_z, B=B_eff, d=d, h=h, m=self.qcfg.m)
            if cfg.shared_randomness:
                self.shared = SharedCoordinates(cfg.seed, h)
        if self.scheme is Scheme.GRADQ_BASELINE:
            self.gcfg = QuantConfig(m=baseline_m(h), B=1.0, d=h, mode=ScaleMode.PER_SAMPLE)
        self.cap_exceeded = 0
        self.fallbacks = 0

    @property
    def m(self) -> int | None:
        if self.qcfg is not None:
            return self.qcfg.m
        if self.scheme is Scheme.GRADQ_BASELINE:
            return self.gcfg.m
        return None

    # -- node side -----------------------------------------------------------
    def _label_bits(self, y) -> BitString:
        return BitString().append(self.task.label_code(y), self.task.label_bits)

    def node_encode(self, w, z, y, counter: int, *, batch_scale=None,
                    send_header=True) -> list[WireMessage]:
        task = self.task
        if self.scheme is Scheme.UNQUANTIZED:
            bits = BitString()
            for v in z:
                bits = bits.append(float64_bits(v), 64)
            return [WireMessage(MsgType.UNQUANTIZED, bits.concat(self._label_bits(y)))]
        if self.scheme is Scheme.GRADQ_BASELINE:
            g = task.grad(w, z, y)
            _, enc = dataq_stochastic(g, self.gcfg, stream(self.seed, Purpose.QUANT, counter))
            self.fallbacks += enc.fallbacks
            return [WireMessage(MsgType.GRADQ_BASELINE, enc.to_bits())]

        pair, enc = dataq_encode(z, self.qcfg, batch_scale=batch_scale, send_header=send_header)
        msgs = [WireMessage(MsgType.SAMPLE_ENC, enc.to_bits().concat(self._label_bits(y)))]
        if self.scheme is Scheme.DAQU_FULL:
            zq = self._reconstruct(pair.a, pair.b, enc, batch_scale)
            delta = task.grad(w, z, y) - task.grad(w, zq, y)
            istar = self.shared(counter) if self.shared is not None else None
            msg = gradcorr_encode(delta, self.params, stream(self.seed, Purpose.CORRECTION, counter), istar)
            self.cap_exceeded += msg.capped
            msgs.append(WireMessage(MsgType.CORRECTION, msg.to_bits(self.params)))
        return msgs

    def _reconstruct(self, a, b, enc: EncodedSample, batch_scale) -> np.ndarray:
        cfg = self.qcfg
        if cfg.mode is ScaleMode.ABSOLUTE:
            return levels_to_point(a, b, cfg.B, cfg.m)
        if cfg.mode is ScaleMode.PER_SAMPLE:
            return enc.scale_header * levels_to_point(a, b, 1.0, cfg.m)
        bound = batch_scale * math.sqrt(cfg.d) if batch_scale > 0 else 1.0
        return levels_to_point(a, b, bound, cfg.m)

    # -- agent side ----------------------------------------------------------
    def agent_decode(self, w, msgs: list[WireMessage], counter: int,
                     batch_state: dict) -> _Decoded:
        task = self.task
        if len(msgs) == 1 and msgs[0].msg_type is MsgType.SKIP:
            if msgs[0].bit_cost:
                raise CorruptMessageError("skip message carries payload")
            return _Decoded(None, False)
        kinds = [m.msg_type for m in msgs]
        if self.scheme is Scheme.UNQUANTIZED:
            self._expect(kinds, [MsgType.UNQUANTIZED])
            r = msgs[0].payload.reader()
            z = np.array([r.read_float64() for _ in range(task.zdim)])
            y = task.label_from_code(r.read(task.label_bits))
            self._done(r)
            return _Decoded(task.grad(w, z, y))
        if self.scheme is Scheme.GRADQ_BASELINE:
            self._expect(kinds, [MsgType.GRADQ_BASELINE])
            r = msgs[0].payload.reader()
            enc = EncodedSample.read(r, self.gcfg, has_header=True)
            self._done(r)
            return _Decoded(dataq_decode(enc, self.gcfg))

        want = [MsgType.SAMPLE_ENC] + ([MsgType.CORRECTION] if self.scheme is Scheme.DAQU_FULL else [])
        self._expect(kinds, want)
        payload = msgs[0].payload
        plain = self.qcfg.table.bit_length + task.label_bits
        if payload.length == plain + HEADER_BITS:
            has_header = True
        elif payload.length == plain and self.qcfg.mode is not ScaleMode.PER_SAMPLE:
            has_header = False
        else:
            raise CorruptMessageError(f"sample payload has unexpected length {payload.length}")
        r = payload.reader()
        enc = EncodedSample.read(r, self.qcfg, has_header)
        y = task.label_from_code(r.read(task.label_bits))
        self._done(r)
        if self.qcfg.mode is ScaleMode.BATCH_MAX and has_header:
            batch_state["scale"] = enc.scale_header
        zq = dataq_decode(enc, self.qcfg, batch_scale=batch_state.get("scale"))
        g = task.grad(w, zq, y)
        if self.scheme is Scheme.DAQU_FULL:
            r = msgs[1].payload.reader()
            istar = self.shared(counter) if self.shared is not None else None
            msg = CorrectionMsg.read(r, self.params, istar)
            self._done(r)
            g = assemble_gradient(g, gradcorr_decode(msg, self.params))
        return _Decoded(g)

    @staticmethod
    def _expect(kinds, want) -> None:
        if kinds != want:
            raise CorruptMessageError(f"expected messages {[k.name for k in want]}, got {[k.name for k in kinds]}")

    @staticmethod
    def _done(reader) -> None:
        if reader.remaining:
            raise CorruptMessageError(f"{reader.remaining} trailing payload bits")


def resolve_Cz(task: Task, cfg: ExperimentConfig) -> float | None:
    """Analytic constant when the task has one, else an empirical probe."""
    if cfg.scheme is not Scheme.DAQU_FULL:
        return None
    c = task.Cz_analytic(cfg.D_radius)
    if c is not None:
        return c
    h, d = task.h, task.zdim
    m = cfg.m if cfg.m is not None else default_m(h, d, cfg.m_factor)
    rng = stream(cfg.seed, Purpose.PROBE)
    est = estimate_Cz(task, cfg.Cz_trials, rng, m=m,
                      w_radius=cfg.D_radius or 1.0, center=task.init_w())
    return est if est > 0 else 1.0


class Simulation:
    """One run: the node side encodes, bytes cross the uplink, the agent
    decodes and updates the model."""

    def __init__(self, cfg: ExperimentConfig, task: Task | None = None):
        self.cfg = cfg
        self.task = task if task is not None else build_task(cfg.task)
        self.C_z = resolve_Cz(self.task, cfg)
        self.codec = Codec(self.task, cfg, self.C_z)
        self.model = ModelState(
            w=self.task.init_w(),
            schedule=LRSchedule(cfg.lr, cfg.lr_decay, tuple(cfg.lr_boundaries)),
            momentum=cfg.momentum,
            radius=cfg.D_radius,
        )
        self.policy = ThresholdPolicy(cfg.selection, c=cfg.selection_c, alpha=cfg.selection_alpha,
                                      horizon=cfg.selection_horizon)
        if cfg.nodes > self.task.N:
            raise ValueError(f"nodes: {cfg.nodes} nodes but only {self.task.N} samples")
        self._shards = np.array_split(np.arange(self.task.N), cfg.nodes)
        self._orders: list[np.ndarray | None] = [None] * cfg.nodes
        self._position = 0
        self.cumulative_bits = 0
        self.iteration_bits: list[int] = []

    def _next_index(self) -> int:
        """Dataset index for the next sample.

        Nodes take turns; node ``k`` walks its own contiguous shard in epochs.
        The selection policy sees an epoch boundary every ``N`` samples.
        """
        N, cfg = self.task.N, self.cfg
        pos = self._position
        if pos > 0 and pos % N == 0:
            self.policy.end_epoch()
        self._position += 1
        node, local = pos % cfg.nodes, pos // cfg.nodes
        shard = self._shards[node]
        epoch, offset = divmod(local, len(shard))
        if offset == 0 or self._orders[node] is None:
            counters = (epoch,) if cfg.nodes == 1 else (epoch, node)
            rng = stream(cfg.seed, Purpose.ORDER, *counters)
            if cfg.sampling is Sampling.IID:
                self._orders[node] = rng.integers(len(shard), size=len(shard))
            else:
                self._orders[node] = rng.permutation(len(shard))
        return int(shard[self._orders[node][offset]])

    def node_step(self, w, z, y, counter: int, threshold: float, **kw) -> list[WireMessage]:
        if self.policy.enabled:
            loss = self.task.loss(w, z, y)
            send = should_transmit(loss, threshold)
            self.policy.observe(loss, send)
            if not send:
                return [WireMessage(MsgType.SKIP)]
        return self.codec.node_encode(w, z, y, counter, **kw)

    def step(self, iteration: int) -> tuple[int, int]:
        """Run one iteration; returns (transmitted, skipped) sample counts."""
        cfg, task = self.cfg, self.task
        w = self.model.w  # broadcast model (downlink is free)
        threshold = self.policy.threshold(iteration)
        batch = [self._next_index() for _ in range(cfg.batch_size)]
        batch_scale = None
        if cfg.quant_mode is ScaleMode.BATCH_MAX and self.codec.qcfg is not None:
            batch_scale = float(max(np.max(np.abs(task.Z[i]), initial=0.0) for i in batch))
        header_sent = False
        batch_state: dict = {}
        total = np.zeros(task.h)
        sent = skipped = bits = 0
        for slot, idx in enumerate(batch):
            z, y = task.point(idx)
            counter = (iteration - 1) * cfg.batch_size + slot
            kw = {}
            if batch_scale is not None:
                kw = {"batch_scale": batch_scale, "send_header": not header_sent}
            msgs = self.node_step(w, z, y, counter, threshold, **kw)
            received = decode_frames(encode_frames(msgs))
            bits += sum(m.bit_cost for m in received)
            out = self.codec.agent_decode(w, received, counter, batch_state)
            if out.transmitted:
                header_sent = True
                sent += 1
                total += out.g
            else:
                skipped += 1
        if sent:
            self.model.apply(total / cfg.batch_size)
        else:
            self.model.skip()
        self.cumulative_bits += bits
        self.iteration_bits.append(bits)
        return sent, skipped

    def run(self) -> RunResult:
        cfg = self.cfg
        records = []
        win_sent = win_skipped = 0
        for it in range(1, cfg.n + 1):
            sent, skipped = self.step(it)
            win_sent += sent
            win_skipped += skipped
            if it % cfg.record_every == 0 or it == cfg.n:
                L, g = self.task.full_risk(self.model.w)
                seen = win_sent + win_skipped
                records.append(MetricsRecord(
                    iteration=it,
                    cumulative_bits=self.cumulative_bits,
                    train_loss=float(L),
                    grad_norm=float(np.linalg.norm(g)),
                    transmitted_fraction=win_sent / seen if seen else 0.0,
                    cap_exceeded_count=self.codec.cap_exceeded,
                    transmitted=win_sent,
                    skipped=win_skipped,
                    threshold=float(self.policy.current),
                ))
                win_sent = win_skipped = 0
        return RunResult(cfg, records, self.model.w.copy(), self.iteration_bits,
                         self.codec.m, self.C_z, self.codec.fallbacks)


def run_experiment(cfg: ExperimentConfig, task: Task | None = None) -> RunResult:
    return Simulation(cfg, task).run()


def meter_report(results: dict[str, RunResult] | list[MetricsRecord]) -> dict:
    """Bits per iteration and totals; ratios against the first scheme given."""
    if isinstance(results, list):
        results = {"run": results}
    summary: dict = {}
    for name, res in results.items():
        recs = res.records if isinstance(res, RunResult) else res
        total = recs[-1].cumulative_bits if recs else 0
        iters = recs[-1].iteration if recs else 0
        summary[name] = {
            "total_bits": total,
            "iterations": iters,
            "bits_per_iteration": total / iters if iters else 0.0,
        }
    names = list(summary)
    if len(names) > 1:
        ref = summary[names[0]]["bits_per_iteration"]
        for name in names:
            bpi = summary[name]["bits_per_iteration"]
            summary[name]["ratio_to_first"] = bpi / ref if ref else None
    return summary


def gradq_bits_bound(h: int) -> float:
    """Bits bound for quantizing an h-dim gradient with ``m = sqrt(h) + 1``."""
    return math.log2(2 * h) + 2 * h * math.log2(3 * math.e)


def daqu_bits_bound(h: int, d: int) -> float:
    """Bits per iteration with correction at ``m = h sqrt(d)``."""
    return 1 + math.log2(h) + 2 * math.log2(h * math.sqrt(d)) + 2 * d * math.log2(math.e * (1 + h * h / 2))


def deviation_bound(C_z: float, B: float, h: int, d: int, m: int) -> float:
    """Worst-case ``||ghat - grad L(w)||`` for the corrected estimator."""
    return C_z * B * (2 + (h + 1) * math.sqrt(d) / (m - 1))


def convex_step_size(C_w: float, sigma: float, D_tilde: float, n: int) -> float:
    """Constant step ``1 / (C_w + 1/gamma)`` with ``gamma = D_tilde / sigma * sqrt(2/n)``.

    The rate that balances the smoothness and noise terms of the convex
    SGD guarantee after ``n`` steps from a start within ``D_tilde`` of every
    feasible point.
    """
    if n < 1 or sigma <= 0 or D_tilde <= 0:
        raise ValueError("need n >= 1, sigma > 0 and D_tilde > 0")
    gamma = D_tilde / sigma * math.sqrt(2.0 / n)
    return 1.0 / (C_w + 1.0 / gamma)
