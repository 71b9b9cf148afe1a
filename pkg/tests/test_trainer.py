import json

import numpy as np
import pytest

from evil_lab.envdata import gen_binary_envs, gen_colored_digits, ColoredDigitSpec, split_environments
from evil_lab.errors import ConfigError, IngestionError
from evil_lab.mask import SparsityConfig
from evil_lab.trainer import (TrainLoopConfig, load_checkpoint, run_variant, run_variants, save_checkpoint)


@pytest.fixture(scope="module")
def small_split():
    envs = gen_colored_digits(ColoredDigitSpec(n=300, seed=0))
    return split_environments(envs, 2)


def cfg(variant="evil", t_total=80, t_pre=20, **kw):
    sp = SparsityConfig(r=kw.pop("r", 0.6), alpha=kw.pop("alpha", 0.2), delta_t=kw.pop("delta_t", 10),
                        t_total=t_total, t_pre=t_pre)
    return TrainLoopConfig(sparsity=sp, variant=variant, widths=kw.pop("widths", (16, 16)),
                           log_every=kw.pop("log_every", 20), **kw)


def same_rows(a, b):
    return json.dumps(a.rows) == json.dumps(b.rows)


def test_identical_seeds_identical_rows(small_split):
    a = run_variant(cfg(), small_split.train, small_split.test)
    b = run_variant(cfg(), small_split.train, small_split.test)
    assert same_rows(a, b) and a.state.mask == b.state.mask


def test_shared_prefix_matches_separate_runs(small_split):
    configs = [cfg(v) for v in ("dense_baseline", "evil", "rigl_ablation")]
    shared = run_variants(configs, small_split.train, small_split.test)
    for c, r in zip(configs, shared):
        solo = run_variant(c, small_split.train, small_split.test)
        assert same_rows(r, solo)
        assert all(np.array_equal(r.state.params[k], solo.state.params[k]) for k in solo.state.params)


def test_mask_cardinality_constant_through_training(small_split):
    res = run_variant(cfg(), small_split.train)
    assert res.state.mask.kept == res.initial_mask.kept
    assert {row["kept"] for row in res.rows} == {res.initial_mask.kept}
    assert res.exchanges and res.exchanges[0]["t"] > 20


def test_only_masked_theta_written_each_step(small_split):
    res = run_variant(cfg(instrument=True), small_split.train)
    for rec in res.trace:
        assert set(rec["updated"].tolist()) <= set(rec["kept"].tolist())


def test_alpha_zero_is_static_mask(small_split):
    res = run_variant(cfg(alpha=0.0), small_split.train)
    assert res.state.mask == res.initial_mask
    assert all(e["k"] == 0 for e in res.exchanges)


def test_delta_t_beyond_horizon_never_explores(small_split):
    res = run_variant(cfg(delta_t=10_000), small_split.train)
    assert res.exchanges == [] and res.state.mask == res.initial_mask


def test_pretraining_lowers_loss(small_split):
    short = run_variant(cfg("dense_baseline", t_total=2, t_pre=1, log_every=1), small_split.train)
    long = run_variant(cfg("dense_baseline", t_total=150, t_pre=1, log_every=150), small_split.train)
    assert np.mean(long.rows[-1]["env_losses"]) < np.mean(short.rows[0]["env_losses"])


def test_perfectly_predictive_invariant_block_is_learned():
    envs = gen_binary_envs(2, 3, [1.0, 1.0], 400, seed=0)
    res = run_variant(cfg("evil", t_total=200, t_pre=40, widths=(8,)), envs)
    assert res.train_acc >= 0.99


def test_evil_keeps_more_invariant_block_weights_than_rigl():
    # first-layer coordinates reading the invariant features of the binary model
    def inv_block_kept(res):
        n_in, w = 5, res.config.widths[0]
        bits = res.state.mask.bits[: n_in * w].reshape(n_in, w)
        return int(bits[:2].sum())

    evil, rigl = [], []
    for seed in range(5):
        envs = gen_binary_envs(2, 3, [0.9, 0.8], 1000, seed=seed)
        out = run_variants([cfg(v, t_total=2000, t_pre=400, delta_t=100, widths=(4,), activation="none",
                                seed=seed, log_every=2000) for v in ("evil", "rigl_ablation")], envs)
        evil.append(inv_block_kept(out[0]))
        rigl.append(inv_block_kept(out[1]))
    assert np.median(evil) >= np.median(rigl)


def test_checkpoint_round_trip(tmp_path, small_split):
    c = cfg()
    res = run_variant(c, small_split.train)
    save_checkpoint(tmp_path / "run.evck", res.state, c, {"ood": 0.5})
    state, header = load_checkpoint(tmp_path / "run.evck")
    assert state.mask == res.state.mask and state.t == res.state.t
    assert all(np.array_equal(state.params[k], res.state.params[k]) for k in res.state.params)
    assert header["metrics"] == {"ood": 0.5}


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(30))
    with pytest.raises(IngestionError):
        load_checkpoint(tmp_path / "x")


def test_unknown_variant():
    with pytest.raises(ConfigError):
        TrainLoopConfig(variant="lottery")
