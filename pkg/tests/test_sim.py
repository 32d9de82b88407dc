import itertools
import json

import numpy as np
import pytest

from daquant.gradcorr import CorrectionMsg, correction_prob
from daquant.problems import TaskSpec, build_task
from daquant.quant import CorruptMessageError, QuantConfig, dataq_decode, dataq_encode, set_size
from daquant.quant.bits import BitString
from daquant.sim import (
    Codec,
    ExperimentConfig,
    Sampling,
    Scheme,
    Simulation,
    convex_step_size,
    deviation_bound,
    run_experiment,
)
from daquant.sim.model import LRSchedule, ModelState
from daquant.sim.rng import Purpose, SharedCoordinates, stream
from daquant.sim.simulator import (
    CSV_COLUMNS,
    baseline_m,
    daqu_bits_bound,
    default_m,
    gradq_bits_bound,
    meter_report,
)
from daquant.sim.wire import MsgType, WireMessage, decode_frames, encode_frames
from daquant.verify import golden_fixture_path, golden_messages

LSQ = TaskSpec(kind="least_squares", d=3, N=40, seed=3)


def config(**kw):
    base = dict(task=LSQ, n=50, lr=0.1, seed=11, record_every=10)
    return ExperimentConfig(**{**base, **kw})


class TestWire:
    def test_skip_frame_bytes(self):
        assert WireMessage(MsgType.SKIP).frame() == bytes([3, 0, 0, 0, 0])

    def test_frame_layout(self):
        msg = WireMessage(MsgType.CORRECTION, BitString(0b10110, 5))
        assert msg.frame() == bytes([2, 0, 0, 0, 5, 0b10110000])
        assert msg.bit_cost == 5

    def test_roundtrip(self):
        msgs = [WireMessage(MsgType.SAMPLE_ENC, BitString(12345, 20)), WireMessage(MsgType.SKIP),
                WireMessage(MsgType.UNQUANTIZED, BitString(1, 1))]
        assert decode_frames(encode_frames(msgs)) == msgs

    @pytest.mark.parametrize("data", [
        bytes([1, 0, 0]),                 # truncated header
        bytes([9, 0, 0, 0, 0]),           # unknown type
        bytes([1, 0, 0, 0, 9, 0xFF]),     # truncated payload
        bytes([2, 0, 0, 0, 3, 0b00011111]),  # nonzero padding
    ])
    def test_corrupt_frames(self, data):
        with pytest.raises(CorruptMessageError):
            decode_frames(data)

    def test_golden_fixture_matches_encoder(self):
        pinned = json.loads(golden_fixture_path().read_text())["cases"]
        built = {k: encode_frames(v).hex() for k, v in golden_messages().items()}
        assert built == pinned

    def test_golden_sizes(self):
        msgs = golden_messages()
        # |S(2,5)| = C(20, 4) = 4845 needs 13 bits
        assert msgs["sample_enc_d2_m5"][0].bit_cost == 13
        assert [m.bit_cost for m in msgs["daqu_full_h16"]] == [14, 5]
        assert msgs["correction_shared_h16"][0].bit_cost == 1


class TestDefaults:
    def test_m_rules(self):
        assert default_m(16, 2) == 23
        assert default_m(1, 1, 0.1) == 2
        assert [baseline_m(h) for h in (1, 4, 5, 9, 10)] == [2, 3, 4, 4, 5]

    def test_bounds_helpers(self):
        assert deviation_bound(2.0, 0.5, 3, 4, 5) == pytest.approx(2.0 * 0.5 * (2 + 4 * 2 / 4))
        assert convex_step_size(1.0, 2.0, 3.0, 8) == pytest.approx(1 / (1 + 2 / (3 * 0.5)))
        assert gradq_bits_bound(10) > daqu_bits_bound(10, 1) / 10

    @pytest.mark.parametrize("kw", [{"n": -1}, {"lr": 0.0}, {"momentum": 1.0}, {"m": 1},
                                    {"batch_size": 0}, {"quant_mode": "batch_max"}, {"scheme": "nope"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            config(**kw)


class TestModel:
    def test_schedule(self):
        s = LRSchedule(1.0, 0.5, (2, 4))
        assert [s.rate(i) for i in range(6)] == [1, 1, 0.5, 0.5, 0.25, 0.25]

    def test_momentum_and_projection(self):
        m = ModelState(w=np.zeros(2), schedule=LRSchedule(1.0), momentum=0.5, radius=1.0)
        m.apply(np.array([-0.4, 0.0]))
        m.apply(np.array([-0.4, 0.0]))
        # buffer is 0.4 then 0.6; the second step would leave the ball
        np.testing.assert_allclose(m.w, [1.0, 0.0])
        m.skip()
        assert m.step == 3


class TestRng:
    def test_streams_are_independent_of_call_order(self):
        a = stream(5, Purpose.QUANT, 3).random()
        stream(5, Purpose.QUANT, 2).random()
        assert stream(5, Purpose.QUANT, 3).random() == a
        assert stream(5, Purpose.CORRECTION, 3).random() != a

    def test_shared_coordinates_blocks(self):
        sc = SharedCoordinates(1, 7)
        vals = [sc(i) for i in (0, 5000, 3, 4096)]
        fresh = SharedCoordinates(1, 7)
        assert vals == [fresh(i) for i in (0, 5000, 3, 4096)]
        assert all(0 <= v < 7 for v in vals)


class TestMessages:
    def test_dataq_only_bits(self):
        task = build_task(TaskSpec(kind="least_squares", d=1, N=10))  # zdim 2, no labels
        codec = Codec(task, config(scheme="dataq_only", m=5), None)
        msgs = codec.node_encode(np.zeros(2), task.Z[0], None, 0)
        assert [m.msg_type for m in msgs] == [MsgType.SAMPLE_ENC]
        assert msgs[0].bit_cost == (set_size(2, 5) - 1).bit_length() == 13

    @pytest.mark.parametrize("shared,extra", [(False, 5), (True, 1)])
    def test_full_scheme_h16(self, shared, extra):
        task = build_task(TaskSpec(kind="logistic", d=15, N=10))
        assert task.h == 16
        codec = Codec(task, config(scheme="daqu_full", m=7, shared_randomness=shared), 1.0)
        z, y = task.point(0)
        msgs = codec.node_encode(np.zeros(16), z, y, 0)
        assert msgs[0].bit_cost == (set_size(15, 7) - 1).bit_length() + 1
        assert msgs[1].msg_type is MsgType.CORRECTION and msgs[1].bit_cost == extra
        g = codec.agent_decode(np.zeros(16), decode_frames(encode_frames(msgs)), 0, {}).g
        assert g.shape == (16,)

    def test_unquantized_roundtrip(self):
        task = build_task(TaskSpec(kind="logistic", d=2, N=10))
        codec = Codec(task, config(scheme="unquantized"), None)
        z, y = task.point(4)
        w = np.array([0.3, -0.2, 0.1])
        msgs = codec.node_encode(w, z, y, 0)
        assert msgs[0].bit_cost == 2 * 64 + 1
        np.testing.assert_array_equal(codec.agent_decode(w, msgs, 0, {}).g, task.grad(w, z, y))

    def test_corrupt_payloads(self):
        task = build_task(LSQ)
        codec = Codec(task, config(scheme="daqu_full", m=5), 1.0)
        w = np.zeros(task.h)
        good = codec.node_encode(w, task.Z[0], None, 0)
        short = WireMessage(MsgType.SAMPLE_ENC, BitString(0, good[0].bit_cost - 1))
        cases = [
            [short, good[1]],
            [good[0]],
            [good[1], good[0]],
            [WireMessage(MsgType.SKIP, BitString(1, 1))],
            [good[0], WireMessage(MsgType.CORRECTION, good[1].payload.append(0, 1))],
        ]
        for msgs in cases:
            with pytest.raises(CorruptMessageError):
                codec.agent_decode(w, msgs, 0, {})
        too_big = WireMessage(MsgType.SAMPLE_ENC, BitString((1 << good[0].bit_cost) - 1, good[0].bit_cost))
        with pytest.raises(CorruptMessageError):
            codec.agent_decode(w, [too_big, good[1]], 0, {})

    def test_full_scheme_expected_update(self):
        # h = 4: enumerate every (istar, e_g) outcome of the correction
        task = build_task(LSQ)
        assert task.h == 4
        eta = 0.1
        codec = Codec(task, config(scheme="daqu_full", m=5), 3.0)
        w = np.array([0.2, -0.4, 0.1, 0.3])
        z = task.Z[7]
        zq = dataq_decode(dataq_encode(z, codec.qcfg)[1], codec.qcfg)
        delta = task.grad(w, z) - task.grad(w, zq)
        sample = codec.node_encode(w, z, None, 0)[0]
        expected = np.zeros(4)
        for istar, e in itertools.product(range(4), (0, 1)):
            p = correction_prob(delta[istar], codec.params.delta_cap)
            assert 0 <= p <= 1
            corr = WireMessage(MsgType.CORRECTION, CorrectionMsg(istar, e).to_bits(codec.params))
            g = codec.agent_decode(w, [sample, corr], 0, {}).g
            expected += (p if e else 1 - p) / 4 * (-eta * g)
        np.testing.assert_allclose(expected, -eta * task.grad(w, z), atol=1e-15)


class TestRuns:
    def test_empty_run(self):
        res = run_experiment(config(n=0))
        assert res.records == [] and res.iteration_bits == []
        np.testing.assert_array_equal(res.w, build_task(LSQ).init_w())

    def test_determinism(self):
        for scheme in Scheme:
            a = run_experiment(config(scheme=scheme))
            b = run_experiment(config(scheme=scheme))
            assert a.to_csv() == b.to_csv()
            np.testing.assert_array_equal(a.w, b.w)

    def test_seed_changes_trace(self):
        assert run_experiment(config()).to_csv() != run_experiment(config(seed=12)).to_csv()

    def test_csv_schema(self):
        lines = run_experiment(config()).to_csv().splitlines()
        assert lines[0] == "# schema_version=1"
        assert lines[1].split(",") == CSV_COLUMNS
        assert CSV_COLUMNS[:6] == ["iteration", "cumulative_bits", "train_loss", "grad_norm",
                                   "transmitted_fraction", "cap_exceeded_count"]
        assert len(lines) == 2 + 5

    def test_unquantized_matches_plain_sgd(self):
        cfg = config(scheme="unquantized", n=100, lr=0.3)
        task = build_task(LSQ)
        w = task.init_w()
        for it in range(cfg.n):
            epoch, offset = divmod(it, task.N)
            idx = stream(cfg.seed, Purpose.ORDER, epoch).permutation(task.N)[offset]
            w = w - cfg.lr * task.grad(w, *task.point(int(idx)))
        res = run_experiment(cfg)
        np.testing.assert_array_equal(res.w, w)
        assert res.iteration_bits == [4 * 64] * cfg.n

    def test_skip_leaves_model_unchanged(self):
        sim = Simulation(config(selection="adaptive"))
        sim.policy.current = 1e9
        w0 = sim.model.w.copy()
        sent, skipped = sim.step(1)
        assert (sent, skipped) == (0, 1)
        assert sim.iteration_bits == [0]
        np.testing.assert_array_equal(sim.model.w, w0)
        assert sim.model.step == 1

    def test_skip_only_trace_has_zero_bits(self):
        sim = Simulation(config(selection="adaptive", n=10))
        sim.policy.alpha = 1.0
        sim.policy.current = 1e9
        assert meter_report(sim.run().records)["run"]["total_bits"] == 0

    def test_least_squares_converges(self):
        task = build_task(TaskSpec(kind="least_squares", d=10, N=500, seed=5))
        L_star = task.full_risk(task.optimum())[0]
        L_0 = task.full_risk(task.init_w())[0]
        base = dict(task=task.spec, n=10_000, lr=0.5, lr_decay=0.1, lr_boundaries=(6000, 8000),
                    D_radius=1.5, record_every=2000, seed=1)
        plain = run_experiment(ExperimentConfig(scheme="unquantized", **base), task)
        # the correction noise scales like 1/m, so m is raised well above h*sqrt(d)
        full = run_experiment(ExperimentConfig(scheme="daqu_full", m_factor=30, **base), task)
        assert plain.records[-1].train_loss - L_star <= 1e-4
        assert full.records[-1].train_loss - L_star <= 0.1 * (L_0 - L_star)
        assert full.records[-1].cap_exceeded_count == 0

    def test_meter_bounds(self):
        task = build_task(TaskSpec(kind="logistic", d=4, N=100, seed=2))
        full = run_experiment(ExperimentConfig(task=task.spec, scheme="daqu_full", n=200, D_radius=2.0), task)
        base = run_experiment(ExperimentConfig(task=task.spec, scheme="gradq_baseline", n=200), task)
        assert max(full.iteration_bits) <= daqu_bits_bound(task.h, task.zdim) + task.label_bits
        assert max(base.iteration_bits) <= gradq_bits_bound(task.h) + 64
        report = meter_report({"full": full, "base": base})
        assert report["full"]["ratio_to_first"] == 1.0
        assert report["base"]["ratio_to_first"] > 1.0

    def test_batch_max_header_once_per_batch(self):
        task = build_task(LSQ)
        cfg = config(scheme="dataq_only", m=6, batch_size=3, quant_mode="batch_max", n=5)
        res = run_experiment(cfg, task)
        plain = (set_size(task.zdim, 6) - 1).bit_length()
        assert res.iteration_bits == [3 * plain + 64] * 5


class TestSampling:
    def test_epochs_are_permutations(self):
        sim = Simulation(config())
        N = sim.task.N
        seq = [sim._next_index() for _ in range(3 * N)]
        for e in range(3):
            assert sorted(seq[e * N:(e + 1) * N]) == list(range(N))

    def test_node_shards(self):
        sim = Simulation(config(nodes=3, task=TaskSpec(kind="least_squares", d=3, N=10, seed=3)))
        seq = [sim._next_index() for _ in range(30)]
        shards = [list(range(0, 4)), list(range(4, 7)), list(range(7, 10))]
        for node, shard in enumerate(shards):
            mine = seq[node::3]
            assert all(i in shard for i in mine)
            n = len(shard)
            for k in range(len(mine) // n):
                assert sorted(mine[k * n:(k + 1) * n]) == shard

    def test_too_many_nodes(self):
        with pytest.raises(ValueError):
            Simulation(config(nodes=41))

    def test_iid_draws(self):
        sim = Simulation(config(sampling=Sampling.IID))
        seq = [sim._next_index() for _ in range(400)]
        assert all(0 <= i < 40 for i in seq)
        # with replacement, an epoch of 40 draws almost surely repeats
        assert len(set(seq[:40])) < 40
        again = Simulation(config(sampling="iid"))
        assert seq == [again._next_index() for _ in range(400)]


class TestGateInLoop:
    def test_skipped_samples_compute_no_gradient(self, monkeypatch):
        sim = Simulation(config(scheme="daqu_full", selection="adaptive"))
        sim.policy.current = 1e9
        monkeypatch.setattr(sim.task, "grad", lambda *a: pytest.fail("gradient computed for a skip"))
        sim.step(1)

    def test_disabled_gate_skips_loss_evaluation(self, monkeypatch):
        ref = run_experiment(config(scheme="dataq_only", m=9))
        sim = Simulation(config(scheme="dataq_only", m=9))
        monkeypatch.setattr(sim.task, "loss", lambda *a: pytest.fail("loss evaluated with the gate off"))
        assert sim.run().to_csv() == ref.to_csv()

    def test_gated_mean_is_clipped_risk_gradient(self):
        task = build_task(TaskSpec(kind="least_squares", d=1, N=30, seed=9))
        sim = Simulation(config(task=task.spec, scheme="unquantized", selection="adaptive"), task)
        w = np.array([0.4, -0.2])
        losses = np.array([task.loss(w, *task.point(i)) for i in range(task.N)])
        th = float(np.median(losses))
        sim.policy.current = th

        def clipped(v):
            return np.mean([max(th, task.loss(v, *task.point(i))) for i in range(task.N)])

        eps = 1e-6
        oracle = np.array([(clipped(w + eps * e) - clipped(w - eps * e)) / (2 * eps) for e in np.eye(2)])
        rng = np.random.default_rng(0)
        draws = []
        for k in range(20_000):
            i = int(rng.integers(task.N))
            msgs = sim.node_step(w, *task.point(i), k, th)
            out = sim.codec.agent_decode(w, msgs, k, {})
            draws.append(out.g if out.transmitted else np.zeros(2))
        draws = np.array(draws)
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - oracle) <= 5 * se)


class TestDataQOnlyBias:
    def test_bias_within_bound(self):
        task = build_task(TaskSpec(kind="least_squares", d=4, N=300, seed=8))
        radius = 1.0
        C_z = task.Cz_analytic(radius)
        rng = np.random.default_rng(1)
        for m in (3, 9, 40):
            qcfg = QuantConfig(m=m, B=task.B, d=task.zdim)
            zq = np.array([dataq_decode(dataq_encode(z, qcfg)[1], qcfg) for z in task.Z])
            for _ in range(20):
                w = rng.normal(size=task.h)
                w *= radius / np.linalg.norm(w)
                mean = np.mean([task.grad(w, z) for z in zq], axis=0)
                bias = np.linalg.norm(mean - task.full_risk(w)[1])
                assert bias <= C_z * task.B * np.sqrt(task.zdim) / (m - 1)
