"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and the reported (non-asserted) budget-solver comparison.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import DESK_CONFIG
from helpers import randomize_params, reference_cal_forward, rel_err
from sysanchor import autograd as ag
from sysanchor import budget, cal, corpus, model, probes, training
from sysanchor.spans import bounds_for


def _report(n, name):
    print(f"\n[acceptance {n:>2}] {name}: PASS")


def _random_bounds(rng, b, t):
    rows = []
    for _ in range(b):
        if rng.random() < 0.2:
            rows.append((0, 0))
        else:
            s = int(rng.integers(0, t - 1))
            e = int(rng.integers(s + 1, t + 1))
            rows.append((s, e))
    return bounds_for(rows)


class TestC01IdentityAtInit:
    def test_identity_at_init(self):
        start = time.monotonic()
        rng = np.random.default_rng(101)
        placements = ["ALL", "EVERY2", "LATEHALF", "LATEQUARTER", "LATE8TH", "LAST"]
        for trial in range(20):
            n_layers = int(rng.choice([2, 4, 6, 8]))
            d = int(rng.choice([16, 32, 64]))
            heads = int(rng.choice([2, 4]))
            base_cfg = model.ModelConfig(
                n_layers=n_layers, d=d, n_heads=heads, vocab_size=64, max_t=32
            )
            weights = model.init_backbone_weights(base_cfg, np.random.default_rng(trial))
            placement = placements[trial % len(placements)]
            b = int(rng.integers(1, 4))
            t = int(rng.integers(6, 16))
            tokens = rng.integers(0, 64, size=(b, t))
            bounds = _random_bounds(rng, b, t)

            base = model.build_model(base_cfg, seed=trial, backbone_weights=weights)
            base_logits = model.forward(base, tokens, bounds).data
            base_loss = float(model.loss_on_batch(base, tokens, bounds).data)
            for kind in ("cal", "parallel_mlp"):
                cfg = model.ModelConfig(
                    n_layers=n_layers, d=d, n_heads=heads, vocab_size=64, max_t=32,
                    adapter=kind, placement=placement,
                )
                adapted = model.build_model(cfg, seed=trial, backbone_weights=weights)
                logits = model.forward(adapted, tokens, bounds).data
                assert np.abs(logits - base_logits).max() <= 1e-5
                loss = float(model.loss_on_batch(adapted, tokens, bounds).data)
                assert abs(loss - base_loss) <= 1e-5
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"identity sweep took {elapsed:.1f}s"
        _report(1, "identity at init (logits and step-0 loss, 20 random triples)")


class TestC02MaskZoneOracle:
    def test_exhaustive_and_random_shapes(self):
        start = time.monotonic()
        params = cal.init_cal_params(8, 2, np.random.default_rng(7))
        randomize_params(params, np.random.default_rng(8))
        rng = np.random.default_rng(9)
        for t in range(1, 9):
            x = rng.normal(size=(1, t, 8)).astype(np.float32)
            for s in range(t + 1):
                for ell in range(t - s + 1):
                    bounds = bounds_for([(s, s + ell)])
                    ours = cal.cal_forward(ag.Tensor(x), bounds, params).data
                    ref = reference_cal_forward(x, bounds.rows, params)
                    assert rel_err(ours, ref) <= 1e-5, (t, s, ell)

        # three-zone structure, checked explicitly on one shape
        mask = cal.build_mask(s=2, ell_sys=3, t=12)
        assert np.all(np.isneginf(mask[:2]))             # before the span
        np.testing.assert_array_equal(mask[3], [0.0, 0.0, float("-inf")])
        assert np.all(mask[5:] == 0.0)                   # after the span

        for trial in range(100):
            d = int(rng.choice([8, 16]))
            heads = 2 if d == 8 else 4
            p = cal.init_cal_params(d, heads, np.random.default_rng(200 + trial))
            randomize_params(p, np.random.default_rng(300 + trial))
            b = int(rng.integers(1, 3))
            t = int(rng.integers(9, 24))
            bounds = _random_bounds(rng, b, t)
            x = rng.normal(size=(b, t, d)).astype(np.float32)
            ours = cal.cal_forward(ag.Tensor(x), bounds, p).data
            ref = reference_cal_forward(x, bounds.rows, p)
            assert rel_err(ours, ref) <= 1e-5, trial
        elapsed = time.monotonic() - start
        assert elapsed < 30.0, f"oracle sweep took {elapsed:.1f}s"
        _report(2, "mask-zone oracle (exhaustive T<=8 plus 100 random shapes)")


class TestC03GradientCorrectness:
    @pytest.mark.parametrize("kind", ["cal", "parallel_mlp"])
    def test_every_adapter_gradient(self, kind):
        start = time.monotonic()
        cfg = model.ModelConfig(
            n_layers=4, d=8, n_heads=2, vocab_size=16, max_t=16,
            adapter=kind, placement="EVERY2",
        )
        m = model.build_model(cfg, seed=31, dtype=np.float64)
        rng = np.random.default_rng(32)
        for params in m.adapters.values():
            randomize_params(params, rng, scale=0.2)
        tokens = rng.integers(0, 16, size=(2, 6))
        bounds = bounds_for([(0, 3), (1, 4)])
        loss = model.loss_on_batch(m, tokens, bounds)
        grads = model.backward_adapters_only(m, loss)
        h = 1e-5
        for name, tensor in m.adapter_parameters():
            flat = tensor.data.reshape(-1)
            fd = np.zeros_like(flat)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                with ag.no_grad():
                    up = float(model.loss_on_batch(m, tokens, bounds).data)
                flat[idx] = orig - h
                with ag.no_grad():
                    dn = float(model.loss_on_batch(m, tokens, bounds).data)
                flat[idx] = orig
                fd[idx] = (up - dn) / (2 * h)
            assert rel_err(grads[name].reshape(-1), fd) <= 1e-4, name
        elapsed = time.monotonic() - start
        assert elapsed < 120.0, f"gradient check took {elapsed:.1f}s"
        _report(3, f"gradient correctness vs finite differences ({kind})")


class TestC04BatchPaddingEquivalence:
    def test_heterogeneous_batches_match_single_rows(self):
        cfg = model.ModelConfig(
            n_layers=4, d=32, n_heads=4, vocab_size=64, max_t=32,
            adapter="cal", placement="EVERY2",
        )
        m = model.build_model(cfg, seed=41)
        rng = np.random.default_rng(42)
        for params in m.adapters.values():
            randomize_params(params, rng, scale=0.1)
        t = 12
        rows = [(0, 7), (2, 5), (0, 0), (3, 9)]
        tokens = rng.integers(0, 64, size=(4, t))
        batched = model.forward(m, tokens, bounds_for(rows)).data
        for i, row in enumerate(rows):
            single = model.forward(m, tokens[i : i + 1], bounds_for([row])).data
            assert np.abs(batched[i] - single[0]).max() <= 1e-6, i
        _report(4, "batch/padding equivalence (heterogeneous span lengths)")


class TestC05IncrementalDecode:
    def test_fifty_steps_and_constant_cache(self):
        cfg = model.ModelConfig(
            n_layers=4, d=32, n_heads=4, vocab_size=64, max_t=96,
            adapter="cal", placement="LATEHALF",
        )
        m = model.build_model(cfg, seed=51)
        rng = np.random.default_rng(52)
        for params in m.adapters.values():
            randomize_params(params, rng, scale=0.1)
        prompt = rng.integers(0, 64, size=(2, 8))
        extra = rng.integers(0, 64, size=(2, 50))
        bounds = bounds_for([(0, 5), (1, 4)])
        session = model.DecodeSession(m, prompt, bounds)
        cache_sizes = [session.cal_cache_elements()]
        full = model.forward(m, np.concatenate([prompt, extra], axis=1), bounds).data
        for step in range(50):
            got = session.step(extra[:, step])
            assert np.abs(got - full[:, 8 + step]).max() <= 1e-5, step
            cache_sizes.append(session.cal_cache_elements())
        assert len(set(cache_sizes)) == 1
        _report(5, "incremental decode equals full forward; O(1) cross-attn cache")


class TestC06PlacementFixtures:
    def test_counts_and_exact_layer_sets(self):
        expected = {
            "ALL": tuple(range(1, 29)),
            "EVERY2": tuple(range(2, 29, 2)),
            "LATEHALF": tuple(range(14, 29)),
            "LATEHALF2": (14, 16, 18, 20, 22, 24, 26, 28),
            "LATETHIRD": tuple(range(18, 29)),
            "LATEQUARTER": tuple(range(21, 29)),
            "LATE8TH": (24, 25, 26, 27, 28),
            "LAST": (28,),
        }
        counts = {"ALL": 28, "EVERY2": 14, "LATEHALF": 15, "LATEHALF2": 8,
                  "LATETHIRD": 11, "LATEQUARTER": 8, "LATE8TH": 5, "LAST": 1}
        for name, positions in expected.items():
            got = model.resolve_placement(name, 28)
            assert got.positions == positions, name
            assert got.count == counts[name], name
        _report(6, "placement fixtures (all eight strategies at 28 layers, exact)")


class TestC07FlopModel:
    def test_endpoints_bounds_and_consistency(self):
        assert budget.speedup_ratio(budget.FlopBudget(10**12, 0, 1)) == 3.0
        assert budget.speedup_ratio(budget.FlopBudget(777, 777, 3)) == 2.0
        rng = np.random.default_rng(71)
        for _ in range(1000):
            p_base = int(rng.integers(2, 10**12))
            p_adapter = int(rng.integers(1, p_base))
            seq = int(rng.integers(1, 10**6))
            b = budget.FlopBudget(p_base, p_adapter, seq)
            rho = budget.speedup_ratio(b)
            assert 2.0 < rho < 3.0
            lora = budget.flops("lora", b).total
            adapter_only = budget.flops("cal", b).total
            assert rho == lora / adapter_only
            assert Fraction(lora, adapter_only) == Fraction(
                6 * (p_base + p_adapter), 2 * (p_base + p_adapter) + 2 * p_adapter
            )
        _report(7, "FLOP model (exact endpoints, 1000 random budgets in (2,3))")


class TestC08LoraSolver:
    def test_fixture_cap_property_and_reported_comparison(self):
        problem = budget.LoraBudgetProblem(
            p_target=272, n_layers=2, hidden=4, kv_dim=4, intermediate=8
        )
        sol = budget.solve_lora_rank(problem)
        assert (sol.rank, sol.alpha) == (2, 4)

        rng = np.random.default_rng(81)
        import warnings as _warnings

        with _warnings.catch_warnings():
            # corner budgets legitimately solve to rank 0 and warn
            _warnings.simplefilter("ignore", UserWarning)
            for _ in range(500):
                h = int(rng.integers(4, 96))
                dkv = int(rng.integers(1, max(h // 2, 2)))  # small kv dim forces the cap often
                inter = int(rng.integers(4, 3 * h))
                n = int(rng.integers(1, 30))
                cost = 2 * (h + dkv) + 4 * h + 3 * (h + inter)
                target = int(rng.integers(cost, 500 * n * cost))
                p = budget.LoraBudgetProblem(
                    p_target=target, n_layers=n, hidden=h, kv_dim=dkv,
                    intermediate=inter, rank_cap=10**9,
                )
                s = budget.solve_lora_rank(p)
                assert abs(s.realized_params - target) <= n * cost, p

        # reported, not asserted: solving at a 28-layer, 1536-wide backbone
        # (kv dim 256, feed-forward 8960) against the budget of five blocks
        probe_cfg = model.ModelConfig(
            n_layers=28, d=1536, n_heads=12, adapter="cal", placement="LATE8TH"
        )
        p_target = budget.count_adapter_params(probe_cfg)
        probe_problem = budget.LoraBudgetProblem(
            p_target=p_target, n_layers=28, hidden=1536, kv_dim=256,
            intermediate=8960, rank_cap=10**9,
        )
        solved = budget.solve_lora_rank(probe_problem)
        print(
            f"\n[acceptance  8] REPORTED: at 28 layers x 1536 hidden (kv 256, "
            f"ff 8960) the five-block budget P_target={p_target:,} solves to "
            f"r={solved.rank} (alpha={solved.alpha}). A solve landing at the "
            f"comparison point r=64 would need "
            f"P_target~={64 * 28 * probe_problem.per_rank_cost:,}, i.e. a "
            f"per-block cost near 6.3*d^2 rather than our 16*d^2 + 2d. "
            f"Informational only; no assertion."
        )
        _report(8, "budget solver (hand fixture exact; 500 cap problems within bound)")


class TestC09FrozenBackbone:
    def test_hash_unchanged_after_500_step_run(self, tokenizer):
        cfg = model.ModelConfig(
            n_layers=4, d=32, n_heads=4, vocab_size=128, max_t=64,
            adapter="cal", placement="LATE8TH",
        )
        m = model.build_model(cfg, seed=91)
        before = model.backbone_hash(m)
        task = corpus.RuleTask(tokenizer, max_t=64)
        data = corpus.generate_corpus(task, 512, seed=92, adversarial_rate=0.3)
        tc = training.TrainConfig(lr=2e-3, batch_size=8, epochs=10, seed=93)
        state = training.train(m, data, tc, total_steps=500)
        assert state.step == 500
        assert model.backbone_hash(m) == before
        _report(9, "frozen backbone (hash identical across a 500-step run)")


class TestC10Behavioral:
    def test_trained_cal_beats_frozen_base(self, tokenizer, desk_backbone):
        start = time.monotonic()
        task = corpus.RuleTask(tokenizer, max_t=64)
        base = model.build_model(
            model.ModelConfig(**DESK_CONFIG), seed=11, backbone_weights=desk_backbone
        )
        base_clean = corpus.evaluate_adherence(base, task, 64, seed=99)
        base_adv = corpus.evaluate_adherence(base, task, 64, seed=100, adversarial=True)

        cfg = model.ModelConfig(**DESK_CONFIG, adapter="cal", placement="LATE8TH")
        m = model.build_model(cfg, seed=11, backbone_weights=desk_backbone)
        data = corpus.generate_corpus(task, 4096, seed=12, adversarial_rate=0.3)
        tc = training.TrainConfig(lr=1e-3, warmup_ratio=0.05, batch_size=32, epochs=4, seed=13)
        state = training.train(m, data, tc, total_steps=2000)
        assert state.step <= 2000

        cal_clean = corpus.evaluate_adherence(m, task, 64, seed=99)
        cal_adv = corpus.evaluate_adherence(m, task, 64, seed=100, adversarial=True)
        elapsed = time.monotonic() - start
        print(
            f"\n[acceptance 10] adherence: base clean={base_clean:.3f} adv={base_adv:.3f}; "
            f"trained clean={cal_clean:.3f} adv={cal_adv:.3f}; "
            f"train+eval {elapsed:.0f}s"
        )
        assert cal_clean >= base_clean + 0.20
        assert cal_adv >= base_adv + 0.10
        assert elapsed < 900.0
        _report(10, "behavioral gain over the frozen base (clean +20pts, adversarial +10pts)")


class TestC11ProbeSanity:
    def test_zero_ratios_fixture_and_bitwise_noninterference(self):
        rng = np.random.default_rng(111)
        cfg = model.ModelConfig(
            n_layers=4, d=8, n_heads=2, vocab_size=16, max_t=16,
            adapter="cal", placement="EVERY2",
        )
        m = model.build_model(cfg, seed=112)
        tokens = rng.integers(0, 16, size=(2, 8))
        bounds = bounds_for([(0, 3), (1, 4)])
        for rec in probes.measure_magnitudes(m, tokens, bounds):
            assert rec.ratio_ffn_pct == 0.0
            assert rec.ratio_full_pct == 0.0

        # constructed fixture: force the feed-forward delta of the layer-4
        # block to 3% of that layer's self-attention output
        from test_probes import _attn_output, _stream_before
        from sysanchor import kernels

        params = m.adapters[4]
        stream = _stream_before(m, tokens, bounds, 4)
        xn2 = kernels.rmsnorm(stream, params.norm2.data, params.eps)
        gated = kernels.silu_gate(xn2 @ params.gate.data, xn2 @ params.up.data)
        g2 = gated.reshape(-1, gated.shape[-1]).astype(np.float64)
        target = 0.03 * _attn_output(m, tokens, bounds, 4)
        wd, *_ = np.linalg.lstsq(g2, target.reshape(-1, target.shape[-1]).astype(np.float64), rcond=None)
        params.wd.data = wd.astype(np.float32)
        rec = [r for r in probes.measure_magnitudes(m, tokens, bounds) if r.layer == 4][0]
        assert rec.ratio_ffn_pct == pytest.approx(3.0, abs=0.1)

        plain = model.forward(m, tokens, bounds).data
        probe = model.ProbeRecorder()
        probed = model.forward(m, tokens, bounds, probe=probe).data
        np.testing.assert_array_equal(plain, probed)
        _report(11, "probe sanity (zero init 0%, 3% fixture, bitwise non-interference)")
