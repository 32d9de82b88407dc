"""Invariant checks at CI scale, grouped by module, plus golden wire fixtures.

``run_checks`` returns one :class:`CheckResult` per check; the ``verify``
CLI command prints them and exits nonzero if any failed.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

MODULES = ("quant-core", "grad-correct", "sample-select", "problems", "sim", "cli")
GOLDEN_NAME = "wire_golden.json"


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        tail = f": {self.detail}" if self.detail else ""
        return f"{status} {self.module}/{self.name}{tail}"


_CHECKS: list[tuple[str, str, Callable]] = []


def _check(module: str):
    def register(fn):
        _CHECKS.append((module, fn.__name__.removeprefix("check_"), fn))
        return fn
    return register


def brute_force_set(d: int, m: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Every pair in the alphabet, by direct enumeration."""
    top = (m - 1) ** 2
    out = []
    for x in itertools.product(range(top + 1), repeat=2 * d):
        if sum(x) <= top:
            out.append((x[:d], x[d:]))
    return out


# -- quant-core ---------------------------------------------------------------

@_check("quant-core")
def check_codec_bijection(ctx) -> None:
    from daquant.quant import rank, set_size, table_for, unrank

    for d, m in [(1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]:
        members = brute_force_set(d, m)
        assert set_size(d, m) == len(members), f"|S({d},{m})| = {set_size(d, m)} != {len(members)}"
        t = table_for(d, m)
        ranks = sorted(rank(a, b, t) for a, b in members)
        assert ranks == list(range(len(members))), f"rank is not a bijection for ({d},{m})"
        for r in range(t.size):
            a, b = unrank(r, t)
            assert rank(a, b, t) == r, f"unrank/rank mismatch at {r} for ({d},{m})"


@_check("quant-core")
def check_dataq_bounds(ctx) -> None:
    from daquant.quant import QuantConfig, bits_bound, dataq_decode, dataq_encode

    rng = np.random.default_rng(11)
    for d, m in [(4, 8), (16, 33)]:
        cfg = QuantConfig(m=m, B=1.0, d=d)
        limit = math.ceil(bits_bound(d, m))
        for _ in range(200):
            z = rng.normal(size=d)
            z *= rng.uniform() ** (1 / d) / np.linalg.norm(z)
            pair, enc = dataq_encode(z, cfg)
            zq = dataq_decode(enc, cfg)
            assert pair.weight <= (m - 1) ** 2
            assert np.max(np.abs(z - zq)) <= 1.0 / (m - 1) + 1e-12
            assert np.linalg.norm(zq) <= 1 + math.sqrt(d) / (m - 1) + 1e-12
            assert enc.bit_length <= limit


@_check("quant-core")
def check_stochastic_unbiased(ctx) -> None:
    from daquant.quant import QuantConfig, dataq_decode, dataq_stochastic

    cfg = QuantConfig(m=4, B=1.0, d=3)
    z = np.array([0.41, -0.27, 0.05])
    rng = np.random.default_rng(5)
    draws = np.array([dataq_decode(dataq_stochastic(z, cfg, rng)[1], cfg) for _ in range(20000)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - z) <= 5 * se + 1e-12), "stochastic DataQ mean is off"


@_check("quant-core")
def check_scalar_unbiased(ctx) -> None:
    from daquant.quant.scalar import scalar_1bit_decode, scalar_1bit_prob

    for x in np.linspace(-1, 1, 21):
        p = scalar_1bit_prob(x)
        mean = p * scalar_1bit_decode(1) + (1 - p) * scalar_1bit_decode(0)
        assert abs(mean - x) <= 1e-12


# -- grad-correct -------------------------------------------------------------

@_check("grad-correct")
def check_exhaustive_unbiased(ctx) -> None:
    from daquant.gradcorr import CorrectionMsg, CorrectionParams, correction_prob, gradcorr_decode

    rng = np.random.default_rng(3)
    for h in range(1, 9):
        params = CorrectionParams(C_z=1.5, B=1.0, d=2, h=h, m=7)
        delta = rng.uniform(-1, 1, size=h) * params.delta_cap
        mean = np.zeros(h)
        for i in range(h):
            p = correction_prob(delta[i], params.delta_cap)
            mean += (p * gradcorr_decode(CorrectionMsg(i, 1), params)
                     + (1 - p) * gradcorr_decode(CorrectionMsg(i, 0), params)) / h
        assert np.max(np.abs(mean - delta)) <= 1e-12, f"biased correction at h={h}"


@_check("grad-correct")
def check_wire_bits(ctx) -> None:
    from daquant.gradcorr import CorrectionMsg, CorrectionParams

    params = CorrectionParams(C_z=1.0, B=1.0, d=1, h=16, m=5)
    assert CorrectionMsg(3, 1).to_bits(params).length == 5
    assert CorrectionMsg(3, 1, uses_shared_randomness=True).to_bits(params).length == 1


# -- sample-select ------------------------------------------------------------

@_check("sample-select")
def check_gate_and_schedules(ctx) -> None:
    from daquant.selection import EpochStats, adaptive_threshold, should_transmit, theory_sqrt_sum

    assert should_transmit(0.5, 0.4) and not should_transmit(0.4, 0.4)
    for n in (100, 10_000):
        assert theory_sqrt_sum(n) <= math.sqrt(n)
    assert adaptive_threshold(EpochStats(), 0.2) == 0.0


# -- problems -----------------------------------------------------------------

@_check("problems")
def check_finite_differences(ctx) -> None:
    from daquant.problems import TaskSpec, build_task, fd_relative_error

    specs = [
        TaskSpec(kind="least_squares", d=5, N=50),
        TaskSpec(kind="logistic", d=5, N=50),
        TaskSpec(kind="poly_logistic", d=1, N=50, degree=3),
        TaskSpec(kind="mlp2", d=4, N=50, hidden=3),
    ]
    rng = np.random.default_rng(9)
    for spec in specs:
        task = build_task(spec)
        for _ in range(10):
            w = task.init_w() + 0.3 * rng.normal(size=task.h)
            z, y = task.point(int(rng.integers(task.N)))
            err = fd_relative_error(task, w, z, y)
            assert err <= 1e-4, f"{spec.kind.value}: finite-difference error {err:.2e}"


# -- sim ----------------------------------------------------------------------

def golden_messages() -> dict[str, list]:
    """The messages pinned by the golden fixture, built from fixed inputs."""
    from daquant.gradcorr import CorrectionMsg, CorrectionParams
    from daquant.quant import BitString, QuantConfig, ScaleMode, dataq_encode, dataq_stochastic
    from daquant.quant.bits import float64_bits
    from daquant.sim.wire import MsgType, WireMessage

    _, enc = dataq_encode([0.3, -0.2], QuantConfig(m=5, B=1.0, d=2))
    _, enc_ps = dataq_encode([0.6, -0.3, 0.1], QuantConfig(m=4, B=1.0, d=3, mode=ScaleMode.PER_SAMPLE))
    params = CorrectionParams(C_z=1.0, B=1.0, d=2, h=16, m=5)
    g = np.array([0.5, -1.25, 0.0, 2.0, -0.75, 0.125, 1.0, -0.5, 0.25])
    gcfg = QuantConfig(m=4, B=1.0, d=9, mode=ScaleMode.PER_SAMPLE)
    _, genc = dataq_stochastic(g, gcfg, np.random.default_rng(2024))
    raw = BitString()
    for v in (0.5, -0.25):
        raw = raw.append(float64_bits(v), 64)
    return {
        "sample_enc_d2_m5": [WireMessage(MsgType.SAMPLE_ENC, enc.to_bits())],
        "sample_enc_per_sample_d3_m4": [WireMessage(MsgType.SAMPLE_ENC, enc_ps.to_bits())],
        "daqu_full_h16": [
            WireMessage(MsgType.SAMPLE_ENC, enc.to_bits().append(1, 1)),
            WireMessage(MsgType.CORRECTION, CorrectionMsg(5, 1).to_bits(params)),
        ],
        "correction_shared_h16": [
            WireMessage(MsgType.CORRECTION, CorrectionMsg(5, 0, True).to_bits(params))],
        "skip": [WireMessage(MsgType.SKIP)],
        "gradq_baseline_h9": [WireMessage(MsgType.GRADQ_BASELINE, genc.to_bits())],
        "unquantized_d2_label": [WireMessage(MsgType.UNQUANTIZED, raw.append(1, 1))],
    }


def golden_fixture_path() -> Path:
    return Path(str(resources.files("daquant") / "fixtures" / GOLDEN_NAME))


def write_golden(path: str | Path) -> None:
    from daquant.sim.wire import encode_frames

    cases = {name: encode_frames(msgs).hex() for name, msgs in golden_messages().items()}
    Path(path).write_text(json.dumps({"schema": 1, "cases": cases}, indent=2) + "\n")


@_check("sim")
def check_golden_fixtures(ctx) -> None:
    from daquant.sim.wire import decode_frames, encode_frames

    path = Path(ctx.get("fixtures") or golden_fixture_path())
    label = f"golden fixture {path.name}"
    try:
        cases = json.loads(path.read_text())["cases"]
        pinned = {name: bytes.fromhex(h) for name, h in cases.items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise AssertionError(f"{label}: unreadable ({exc})") from None
    built = golden_messages()
    for name in sorted(set(built) | set(pinned)):
        if name not in pinned:
            raise AssertionError(f"{label}: case {name!r} missing")
        if name not in built:
            raise AssertionError(f"{label}: unknown case {name!r}")
        if encode_frames(built[name]) != pinned[name]:
            raise AssertionError(f"{label}: case {name!r} does not match the encoder")
        try:
            decoded = decode_frames(pinned[name])
        except ValueError as exc:
            raise AssertionError(f"{label}: case {name!r} does not decode ({exc})") from None
        if decoded != built[name]:
            raise AssertionError(f"{label}: case {name!r} decodes to different messages")


def _short_config(scheme, **kw):
    from daquant.problems import TaskSpec
    from daquant.sim import ExperimentConfig

    base = dict(task=TaskSpec(kind="logistic", d=4, N=40), scheme=scheme, n=60,
                record_every=20, D_radius=5.0, seed=4)
    base.update(kw)
    return ExperimentConfig(**base)


@_check("sim")
def check_determinism(ctx) -> None:
    from daquant.sim import Scheme, run_experiment

    for scheme in Scheme:
        a = run_experiment(_short_config(scheme)).to_csv()
        b = run_experiment(_short_config(scheme)).to_csv()
        assert a == b, f"{scheme.value}: CSV differs between identical runs"


@_check("sim")
def check_meter_bounds(ctx) -> None:
    from daquant.quant import bits_bound
    from daquant.sim import Scheme, Simulation, gradq_bits_bound

    sim = Simulation(_short_config(Scheme.DAQU_FULL))
    res = sim.run()
    t, p = sim.task, sim.codec.params
    limit = math.ceil(bits_bound(t.zdim, res.m)) + t.label_bits + p.index_bits + 1
    assert max(res.iteration_bits) <= limit, "DaQuFull iteration exceeds its bit budget"
    sim = Simulation(_short_config(Scheme.GRADQ_BASELINE))
    res = sim.run()
    assert max(res.iteration_bits) <= gradq_bits_bound(sim.task.h) + 64


@_check("sim")
def check_skip_semantics(ctx) -> None:
    from daquant.sim import Scheme, Simulation

    sim = Simulation(_short_config(Scheme.DATAQ_ONLY, selection="adaptive"))
    sim.policy.current = 1e9  # gate closed for every sample
    w0 = sim.model.w.copy()
    sim.step(1)
    assert sim.iteration_bits == [0] and np.array_equal(sim.model.w, w0)


# -- cli ----------------------------------------------------------------------

@_check("cli")
def check_config_roundtrip(ctx) -> None:
    from daquant.config import ConfigError, load_config, parse_config

    cfg = load_config(None, ["task.kind=logistic", "schemes=daqu_full,unquantized", "train.n=5"])
    again = parse_config(cfg.dumps())
    assert again.values == cfg.values, "resolved config does not re-parse to itself"
    try:
        parse_config("train.bogus = 1")
    except ConfigError as exc:
        assert "train.bogus" in str(exc)
    else:
        raise AssertionError("unknown key accepted")


def run_checks(modules: list[str] | None = None, fixtures: str | None = None) -> list[CheckResult]:
    if modules:
        unknown = sorted(set(modules) - set(MODULES))
        if unknown:
            raise ValueError(f"unknown module(s) {', '.join(unknown)}; choose from {', '.join(MODULES)}")
    ctx = {"fixtures": fixtures}
    results = []
    for module, name, fn in _CHECKS:
        if modules and module not in modules:
            continue
        try:
            fn(ctx)
        except AssertionError as exc:
            results.append(CheckResult(module, name, False, str(exc) or "assertion failed"))
        except Exception as exc:  # a crash is a failure too, reported not raised
            results.append(CheckResult(module, name, False, f"{type(exc).__name__}: {exc}"))
        else:
            results.append(CheckResult(module, name, True))
    return results
