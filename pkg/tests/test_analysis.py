import csv

import numpy as np
import pytest

from kvc.analysis import (
    activation_histograms,
    attention_correlation,
    build_passkey_prompt,
    memory_curve,
    passkey_bench,
    pearson,
    reconstruction_error,
    run_trials,
    spearman,
    summarize_columns,
    write_csv,
    PK_DIGIT_BASE,
    PK_MARKER,
    PK_TRIGGER,
)
from kvc.model import random_model
from conftest import tiny_config


def rng_tokens(model, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, model.config.vocab_size, size=n).tolist()


class TestReconstructionError:
    def test_ratio_zero_error_vanishes(self, tiny_model):
        tokens = rng_tokens(tiny_model, 64, seed=1)
        errs = reconstruction_error(tiny_model, tokens, "knorm", 0.0)
        assert errs.shape == (tiny_model.config.n_layers,)
        assert errs.max() <= 1e-5

    def test_oracle_beats_anti_oracle_per_layer(self, tiny_model):
        tokens = rng_tokens(tiny_model, 72, seed=2)
        best = reconstruction_error(tiny_model, tokens, "oracle", 0.5)
        worst = reconstruction_error(tiny_model, tokens, "anti_oracle", 0.5)
        assert (best <= worst).all()

    def test_short_sequence_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            reconstruction_error(tiny_model, [1] * 10, "knorm", 0.5)

    def test_random_seeds_average(self, tiny_model):
        tokens = rng_tokens(tiny_model, 64, seed=3)
        errs = reconstruction_error(tiny_model, tokens, "random", 0.5, seeds=(0, 1, 2))
        assert np.isfinite(errs).all() and (errs >= 0).all()


class TestCorrelationHelpers:
    def test_injection_control_is_exactly_one(self):
        rng = np.random.default_rng(0)
        expected = rng.random(50)
        assert pearson(expected, expected.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_decorrelation_control_is_small(self):
        rng = np.random.default_rng(1)
        x = rng.random(4000)
        y = x.copy()
        rng.shuffle(y)
        assert abs(pearson(x, y)) < 0.1

    def test_degenerate_variance_reported_nan(self):
        assert np.isnan(pearson(np.ones(5), np.arange(5.0)))

    def test_spearman_monotone_transform(self):
        x = np.array([0.1, 0.4, 0.2, 0.9])
        assert spearman(x, np.exp(x)) == pytest.approx(1.0)


class TestAttentionCorrelation:
    def test_rows_cover_all_heads_and_bounds(self, tiny_model):
        tokens = rng_tokens(tiny_model, 96, seed=4)
        rows = attention_correlation(tiny_model, tokens, stats_prefix_len=64, horizon=16)
        c = tiny_model.config
        assert len(rows) == c.n_layers * c.n_heads
        for row in rows:
            if not np.isnan(row["pearson"]):
                assert -1.0 <= row["pearson"] <= 1.0

    def test_prefix_too_long_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            attention_correlation(tiny_model, [1] * 32, stats_prefix_len=30, horizon=8)


class TestPasskey:
    def test_prompt_layout(self):
        rng = np.random.default_rng(0)
        prompt = build_passkey_prompt(64, 0.5, [1, 2, 3, 4], rng)
        assert len(prompt) == 64
        assert prompt[-1] == PK_TRIGGER
        marks = [i for i, t in enumerate(prompt) if t == PK_MARKER]
        assert len(marks) == 2 and marks[1] - marks[0] == 5
        digits = prompt[marks[0] + 1 : marks[1]]
        assert digits == [PK_DIGIT_BASE + d for d in [1, 2, 3, 4]]

    def test_depth_zero_and_one(self):
        rng = np.random.default_rng(0)
        first = build_passkey_prompt(32, 0.0, [5], rng)
        assert first[0] == PK_MARKER
        last = build_passkey_prompt(32, 1.0, [5], rng)
        assert last[-1] == PK_TRIGGER and last[-2] == PK_MARKER

    def test_grid_shape_and_determinism(self, tiny_model):
        rows = passkey_bench(
            tiny_model, [64, 96], [0.0, 0.5], r=0.5, policy="knorm", trials=2, seed=7
        )
        again = passkey_bench(
            tiny_model, [64, 96], [0.0, 0.5], r=0.5, policy="knorm", trials=2, seed=7
        )
        assert rows == again
        assert len(rows) == 4
        for row in rows:
            assert 0.0 <= row["accuracy"] <= 1.0

    def test_ratio_zero_matches_uncompressed(self, tiny_model):
        a = passkey_bench(tiny_model, [64], [0.5], r=0.0, policy="random", trials=3, seed=1)
        b = passkey_bench(tiny_model, [64], [0.5], r=0.0, policy="knorm", trials=3, seed=1)
        assert a[0]["accuracy"] == b[0]["accuracy"]

    def test_overlong_haystack_rejected(self):
        small = random_model(tiny_config(max_position=64), seed=0)
        with pytest.raises(ValueError):
            passkey_bench(small, [64], [0.5], 0.0, "knorm", 1)


class TestMemoryCurve:
    def test_uncompressed_line_is_linear(self, tiny_model):
        c = tiny_model.config
        rows = memory_curve(tiny_model, [64, 128, 256], [0.0])
        slope = c.n_layers * c.n_kv_heads * 2 * c.head_dim * 4
        for row in rows:
            assert row["analytic_bytes"] == row["length"] * slope
            assert row["measured_bytes"] == row["analytic_bytes"]

    def test_half_ratio_halves_bytes(self, tiny_model):
        rows = memory_curve(tiny_model, [128], [0.0, 0.5])
        full, half = rows[0], rows[1]
        assert half["measured_bytes"] == full["measured_bytes"] // 2
        assert half["measured_bytes"] == half["analytic_bytes"]

    def test_hand_computed_point(self, tiny_model):
        c = tiny_model.config
        rows = memory_curve(tiny_model, [2048], [0.9])
        kept = round(0.1 * 2048 * c.n_kv_heads)
        want = kept * 2 * c.head_dim * 4 * c.n_layers
        assert rows[0]["measured_bytes"] == want
        assert rows[0]["analytic_bytes"] == want


class TestHistograms:
    def test_gaussian_fit_recovers_parameters(self):
        rng = np.random.default_rng(5)
        data = rng.normal(loc=2.0, scale=3.0, size=(20_000, 2))
        summary = summarize_columns(data)
        for col in summary:
            assert abs(col["mean"] - 2.0) <= 0.05 * 3.0
            assert abs(col["std"] - 3.0) <= 0.05 * 3.0
            assert not col["degenerate"]

    def test_constant_stream_degenerate(self):
        summary = summarize_columns(np.full((100, 3), 1.5))
        assert all(col["degenerate"] for col in summary)
        assert all(col["std"] == 0.0 for col in summary)

    def test_model_stream_emits_data(self, tiny_model):
        out = activation_histograms(tiny_model, rng_tokens(tiny_model, 48, seed=6), 0, 1)
        assert len(out["hidden"]) == tiny_model.config.hidden_dim
        assert len(out["queries"]) == tiny_model.config.head_dim
        assert all(len(c["counts"]) == 64 for c in out["hidden"])


def test_write_csv_and_run_trials(tmp_path):
    rows = [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.5}]
    path = tmp_path / "out.csv"
    write_csv(path, rows)
    with open(path) as f:
        back = list(csv.DictReader(f))
    assert back[1]["b"] == "4.5"
    assert run_trials(lambda x: x * x, [1, 2, 3], workers=2) == [1, 4, 9]
    with pytest.raises(ValueError):
        write_csv(tmp_path / "empty.csv", [])
